#pragma once

// Dense 2-D tensors with tape-free reverse-mode differentiation.
//
// A Var is a shared handle to a graph node. Ops build new nodes that keep
// their parents alive and carry a closure that pushes the node's adjoint
// into the parents. backward() orders the reachable graph topologically and
// runs the closures in reverse. Leaf grads accumulate across calls; use
// zero_grad() to reset them.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "marginlm/error.hpp"

namespace marginlm {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;
using Shape = std::array<Index, 2>;

inline std::string shape_str(Shape s) { return "[" + std::to_string(s[0]) + "x" + std::to_string(s[1]) + "]"; }

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// While alive, ops record no graph edges (evaluation mode).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Matrix<T> value;
  Matrix<T> grad;  // 0x0 until populated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool has_grad() const { return grad.rows() == value.rows() && grad.cols() == value.cols() && grad.size() > 0; }

  void ensure_grad() {
    if (!has_grad()) grad = Matrix<T>::Zero(value.rows(), value.cols());
  }

  template <typename Expr>
  void accumulate(const Expr& g) {
    ensure_grad();
    grad += g;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Matrix<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var scalar(T v) {
    Matrix<T> m(1, 1);
    m(0, 0) = v;
    return Var(std::move(m));
  }

  bool defined() const { return node_ != nullptr; }
  const Matrix<T>& value() const { return node_->value; }
  Matrix<T>& mutable_value() { return node_->value; }
  const Matrix<T>& grad() const { return node_->grad; }
  Matrix<T>& mutable_grad() { return node_->grad; }
  bool has_grad() const { return node_->has_grad(); }
  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { node_->grad = Matrix<T>::Zero(node_->value.rows(), node_->value.cols()); }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Shape shape() const { return {rows(), cols()}; }
  T item() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return node_->value(0, 0);
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

// Creates the output node. When no parent requires grad (or grad recording
// is off), the backward closure and parent links are dropped.
template <typename T, typename Backward>
Var<T> make_result(Matrix<T> value, std::initializer_list<const Var<T>*> parents, Backward&& backward) {
  Var<T> out(std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Var<T>* p : parents) any = any || p->requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const Var<T>* p : parents) node.parents.push_back(p->node());
  node.backward = std::forward<Backward>(backward);
  return out;
}

template <typename T>
Var<T> make_result_many(Matrix<T> value, const std::vector<Var<T>>& parents, std::function<void(Node<T>&)> backward) {
  Var<T> out(std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& p : parents) node.parents.push_back(p.node());
  node.backward = std::move(backward);
  return out;
}

template <typename T>
void push(const std::shared_ptr<Node<T>>& parent, const auto& g) {
  if (parent->requires_grad) parent->accumulate(g);
}

// Result shape for broadcasting binary ops: each dim equal or one of them 1.
inline Shape broadcast_shape(Shape a, Shape b, const char* op) {
  Shape out{};
  for (int d = 0; d < 2; ++d) {
    if (a[d] == b[d] || b[d] == 1) {
      out[d] = a[d];
    } else if (a[d] == 1) {
      out[d] = b[d];
    } else {
      throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    }
  }
  return out;
}

template <typename T>
Matrix<T> expand(const Matrix<T>& m, Shape to) {
  if (m.rows() == to[0] && m.cols() == to[1]) return m;
  return m.replicate(to[0] / m.rows(), to[1] / m.cols());
}

inline bool same_shape(Shape a, Shape b) { return a[0] == b[0] && a[1] == b[1]; }

// Sums a full-shape adjoint back down to a (possibly broadcast) operand shape.
template <typename T>
Matrix<T> reduce_to(const Matrix<T>& g, Shape to) {
  if (g.rows() == to[0] && g.cols() == to[1]) return g;
  if (to[0] == 1 && to[1] == 1) {
    Matrix<T> s(1, 1);
    s(0, 0) = g.sum();
    return s;
  }
  if (to[0] == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

}  // namespace detail

// ---------------------------------------------------------------- backward

template <typename T>
void backward(const Var<T>& root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw ShapeError("backward: root must be a scalar, got " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;

  // iterative post-order DFS
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // interior adjoints restart from zero; leaves accumulate
  for (Node<T>* n : order) {
    if (!n->parents.empty()) n->grad = Matrix<T>::Zero(n->value.rows(), n->value.cols());
    else n->ensure_grad();
  }
  root.node()->grad(0, 0) += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward) n->backward(*n);
  }
}

// ---------------------------------------------------------------- constructors

template <typename T>
Var<T> constant(Matrix<T> m) {
  return Var<T>(std::move(m), false);
}

template <typename T>
Var<T> parameter(Matrix<T> m) {
  return Var<T>(std::move(m), true);
}

template <typename T>
Var<T> stop_gradient(const Var<T>& a) {
  return Var<T>(a.value(), false);
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Matrix<T> v = a.value() * b.value();
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(std::move(v), {&a, &b}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) pa->accumulate(self.grad * pb->value.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value.transpose() * self.grad);
  });
}

// a * b^T without materializing the transpose in the graph.
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Matrix<T> v = a.value() * b.value().transpose();
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(std::move(v), {&a, &b}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) pa->accumulate(self.grad * pb->value);
    if (pb->requires_grad) pb->accumulate(self.grad.transpose() * pa->value);
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  Matrix<T> v = a.value().transpose();
  auto pa = a.node();
  return detail::make_result<T>(std::move(v), {&a},
                                [pa](Node<T>& self) { pa->accumulate(self.grad.transpose()); });
}

// ---------------------------------------------------------------- broadcasting elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (detail::same_shape(a.shape(), b.shape())) {
    Matrix<T> v = a.value() + b.value();
    auto pa = a.node(), pb = b.node();
    return detail::make_result<T>(std::move(v), {&a, &b}, [pa, pb](Node<T>& self) {
      if (pa->requires_grad) pa->accumulate(self.grad);
      if (pb->requires_grad) pb->accumulate(self.grad);
    });
  }
  const Shape s = detail::broadcast_shape(a.shape(), b.shape(), "add");
  Matrix<T> v = detail::expand(a.value(), s) + detail::expand(b.value(), s);
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(std::move(v), {&a, &b}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) pa->accumulate(detail::reduce_to(self.grad, {pa->value.rows(), pa->value.cols()}));
    if (pb->requires_grad) pb->accumulate(detail::reduce_to(self.grad, {pb->value.rows(), pb->value.cols()}));
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  const Shape s = detail::broadcast_shape(a.shape(), b.shape(), "sub");
  Matrix<T> v = detail::expand(a.value(), s) - detail::expand(b.value(), s);
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(std::move(v), {&a, &b}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) pa->accumulate(detail::reduce_to(self.grad, {pa->value.rows(), pa->value.cols()}));
    if (pb->requires_grad) {
      Matrix<T> neg = -self.grad;
      pb->accumulate(detail::reduce_to(neg, {pb->value.rows(), pb->value.cols()}));
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (detail::same_shape(a.shape(), b.shape())) {
    Matrix<T> v = a.value().cwiseProduct(b.value());
    auto pa = a.node(), pb = b.node();
    return detail::make_result<T>(std::move(v), {&a, &b}, [pa, pb](Node<T>& self) {
      if (pa->requires_grad) pa->accumulate(self.grad.cwiseProduct(pb->value));
      if (pb->requires_grad) pb->accumulate(self.grad.cwiseProduct(pa->value));
    });
  }
  const Shape s = detail::broadcast_shape(a.shape(), b.shape(), "mul");
  Matrix<T> ea = detail::expand(a.value(), s);
  Matrix<T> eb = detail::expand(b.value(), s);
  Matrix<T> v = ea.cwiseProduct(eb);
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(std::move(v), {&a, &b}, [pa, pb, s](Node<T>& self) {
    if (pa->requires_grad) {
      Matrix<T> g = self.grad.cwiseProduct(detail::expand(pb->value, s));
      pa->accumulate(detail::reduce_to(g, {pa->value.rows(), pa->value.cols()}));
    }
    if (pb->requires_grad) {
      Matrix<T> g = self.grad.cwiseProduct(detail::expand(pa->value, s));
      pb->accumulate(detail::reduce_to(g, {pb->value.rows(), pb->value.cols()}));
    }
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  const Shape s = detail::broadcast_shape(a.shape(), b.shape(), "div");
  Matrix<T> eb = detail::expand(b.value(), s);
  if ((eb.array() == T(0)).any()) throw DomainError("div: division by zero");
  Matrix<T> v = detail::expand(a.value(), s).cwiseQuotient(eb);
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(std::move(v), {&a, &b}, [pa, pb, s](Node<T>& self) {
    Matrix<T> den = detail::expand(pb->value, s);
    if (pa->requires_grad) {
      Matrix<T> g = self.grad.cwiseQuotient(den);
      pa->accumulate(detail::reduce_to(g, {pa->value.rows(), pa->value.cols()}));
    }
    if (pb->requires_grad) {
      // d(a/b)/db = -(a/b)/b
      Matrix<T> g = -self.grad.cwiseProduct(self.value).cwiseQuotient(den);
      pb->accumulate(detail::reduce_to(g, {pb->value.rows(), pb->value.cols()}));
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Matrix<T> v = a.value() * c;
  auto pa = a.node();
  return detail::make_result<T>(std::move(v), {&a}, [pa, c](Node<T>& self) { pa->accumulate(self.grad * c); });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
  Matrix<T> v = a.value().array() + c;
  auto pa = a.node();
  return detail::make_result<T>(std::move(v), {&a}, [pa](Node<T>& self) { pa->accumulate(self.grad); });
}

// ---------------------------------------------------------------- unary elementwise

template <typename T>
Var<T> exp(const Var<T>& a) {
  Matrix<T> v = a.value().array().exp();
  auto pa = a.node();
  return detail::make_result<T>(std::move(v), {&a},
                                [pa](Node<T>& self) { pa->accumulate(self.grad.cwiseProduct(self.value)); });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  if ((a.value().array() <= T(0)).any()) throw DomainError("log: non-positive argument");
  Matrix<T> v = a.value().array().log();
  auto pa = a.node();
  return detail::make_result<T>(std::move(v), {&a},
                                [pa](Node<T>& self) { pa->accumulate(self.grad.cwiseQuotient(pa->value)); });
}

template <typename T>
Var<T> sqrt(const Var<T>& a) {
  if ((a.value().array() < T(0)).any()) throw DomainError("sqrt: negative argument");
  Matrix<T> v = a.value().array().sqrt();
  auto pa = a.node();
  return detail::make_result<T>(std::move(v), {&a}, [pa](Node<T>& self) {
    pa->accumulate((self.grad.array() / (T(2) * self.value.array())).matrix());
  });
}

template <typename T>
Var<T> cos(const Var<T>& a) {
  Matrix<T> v = a.value().array().cos();
  auto pa = a.node();
  return detail::make_result<T>(std::move(v), {&a}, [pa](Node<T>& self) {
    pa->accumulate((-self.grad.array() * pa->value.array().sin()).matrix());
  });
}

// Rejects inputs outside [-1, 1]; the derivative is unbounded at +-1, so
// differentiable callers clamp first.
template <typename T>
Var<T> arccos(const Var<T>& a) {
  if ((a.value().array().abs() > T(1)).any()) throw DomainError("arccos: argument outside [-1, 1]");
  Matrix<T> v = a.value().array().acos();
  auto pa = a.node();
  return detail::make_result<T>(std::move(v), {&a}, [pa](Node<T>& self) {
    auto x = pa->value.array();
    pa->accumulate((-self.grad.array() / (T(1) - x * x).sqrt()).matrix());
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Matrix<T> v = (T(1) / (T(1) + (-a.value().array()).exp())).matrix();
  auto pa = a.node();
  return detail::make_result<T>(std::move(v), {&a}, [pa](Node<T>& self) {
    auto y = self.value.array();
    pa->accumulate((self.grad.array() * y * (T(1) - y)).matrix());
  });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  Matrix<T> v = a.value().array().tanh();
  auto pa = a.node();
  return detail::make_result<T>(std::move(v), {&a}, [pa](Node<T>& self) {
    auto y = self.value.array();
    pa->accumulate((self.grad.array() * (T(1) - y * y)).matrix());
  });
}

// Values outside [lo, hi] are pinned and pass no adjoint.
template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  if (lo > hi) throw UsageError("clamp: lo > hi");
  Matrix<T> v = a.value().cwiseMax(lo).cwiseMin(hi);
  auto pa = a.node();
  return detail::make_result<T>(std::move(v), {&a}, [pa, lo, hi](Node<T>& self) {
    auto x = pa->value.array();
    pa->accumulate((self.grad.array() * ((x >= lo) && (x <= hi)).template cast<T>()).matrix());
  });
}

// Multiplies by a 0/1 (or scaled) mask that is treated as a constant.
template <typename T>
Var<T> mask(const Var<T>& a, const Matrix<T>& m) {
  if (m.rows() != a.rows() || m.cols() != a.cols()) {
    throw ShapeError("mask: shapes " + shape_str(a.shape()) + " and " + shape_str({m.rows(), m.cols()}));
  }
  Matrix<T> v = a.value().cwiseProduct(m);
  auto pa = a.node();
  return detail::make_result<T>(std::move(v), {&a}, [pa, m](Node<T>& self) { pa->accumulate(self.grad.cwiseProduct(m)); });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
  Matrix<T> v(1, 1);
  v(0, 0) = a.value().sum();
  auto pa = a.node();
  return detail::make_result<T>(std::move(v), {&a}, [pa](Node<T>& self) {
    pa->accumulate(Matrix<T>::Constant(pa->value.rows(), pa->value.cols(), self.grad(0, 0)));
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  if (a.value().size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

// L2 norm along an axis: axis 1 gives one norm per row [R x 1], axis 0 one
// per column [1 x C]. The adjoint at a zero vector is taken as zero.
template <typename T>
Var<T> norm_l2(const Var<T>& a, int axis) {
  if (axis != 0 && axis != 1) throw UsageError("norm_l2: axis must be 0 or 1");
  Matrix<T> v = axis == 1 ? Matrix<T>(a.value().rowwise().norm()) : Matrix<T>(a.value().colwise().norm());
  auto pa = a.node();
  return detail::make_result<T>(std::move(v), {&a}, [pa, axis](Node<T>& self) {
    Matrix<T> inv = self.value.unaryExpr([](T n) { return n > T(0) ? T(1) / n : T(0); });
    Matrix<T> coef = self.grad.cwiseProduct(inv);
    if (axis == 1) {
      pa->accumulate((pa->value.array().colwise() * coef.col(0).array()).matrix());
    } else {
      pa->accumulate((pa->value.array().rowwise() * coef.row(0).array()).matrix());
    }
  });
}

// ---------------------------------------------------------------- structural

// axis 0 stacks rows, axis 1 stacks columns.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  if (axis != 0 && axis != 1) throw UsageError("concat: axis must be 0 or 1");
  Index rows = 0, cols = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      if (p.cols() != parts[0].cols()) {
        throw ShapeError("concat: shapes " + shape_str(parts[0].shape()) + " and " + shape_str(p.shape()));
      }
      rows += p.rows();
      cols = p.cols();
    } else {
      if (p.rows() != parts[0].rows()) {
        throw ShapeError("concat: shapes " + shape_str(parts[0].shape()) + " and " + shape_str(p.shape()));
      }
      cols += p.cols();
      rows = p.rows();
    }
  }
  Matrix<T> v(rows, cols);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    if (axis == 0) {
      v.middleRows(off, p.rows()) = p.value();
      off += p.rows();
    } else {
      v.middleCols(off, p.cols()) = p.value();
      off += p.cols();
    }
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result_many<T>(std::move(v), parts, [nodes, offsets, axis](Node<T>& self) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      auto& n = nodes[i];
      if (!n->requires_grad) continue;
      if (axis == 0) n->accumulate(self.grad.middleRows(offsets[i], n->value.rows()));
      else n->accumulate(self.grad.middleCols(offsets[i], n->value.cols()));
    }
  });
}

// Half-open [begin, end) along an axis.
template <typename T>
Var<T> slice(const Var<T>& a, int axis, Index begin, Index end) {
  if (axis != 0 && axis != 1) throw UsageError("slice: axis must be 0 or 1");
  const Index extent = axis == 0 ? a.rows() : a.cols();
  if (begin < 0 || end > extent || begin >= end) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
                     shape_str(a.shape()));
  }
  Matrix<T> v = axis == 0 ? Matrix<T>(a.value().middleRows(begin, end - begin))
                          : Matrix<T>(a.value().middleCols(begin, end - begin));
  auto pa = a.node();
  return detail::make_result<T>(std::move(v), {&a}, [pa, axis, begin](Node<T>& self) {
    pa->ensure_grad();
    if (axis == 0) pa->grad.middleRows(begin, self.grad.rows()) += self.grad;
    else pa->grad.middleCols(begin, self.grad.cols()) += self.grad;
  });
}

// Row lookup (embedding): out[i] = table[ids[i]].
template <typename T>
Var<T> gather_rows(const Var<T>& table, std::span<const std::uint32_t> ids) {
  Matrix<T> v(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= static_cast<std::size_t>(table.rows())) {
      throw UsageError("gather_rows: id " + std::to_string(ids[i]) + " out of range for " + shape_str(table.shape()));
    }
    v.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  auto pt = table.node();
  std::vector<std::uint32_t> idx(ids.begin(), ids.end());
  return detail::make_result<T>(std::move(v), {&table}, [pt, idx = std::move(idx)](Node<T>& self) {
    pt->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) pt->grad.row(idx[i]) += self.grad.row(static_cast<Index>(i));
  });
}

// out[i] = a[i, cols[i]] as an [R x 1] column.
template <typename T>
Var<T> gather_cols(const Var<T>& a, std::span<const std::uint32_t> cols) {
  if (static_cast<Index>(cols.size()) != a.rows()) throw ShapeError("gather_cols: one column index per row required");
  Matrix<T> v(a.rows(), 1);
  for (Index i = 0; i < a.rows(); ++i) {
    if (cols[i] >= static_cast<std::size_t>(a.cols())) throw UsageError("gather_cols: column out of range");
    v(i, 0) = a.value()(i, cols[i]);
  }
  auto pa = a.node();
  std::vector<std::uint32_t> idx(cols.begin(), cols.end());
  return detail::make_result<T>(std::move(v), {&a}, [pa, idx = std::move(idx)](Node<T>& self) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) pa->grad(static_cast<Index>(i), idx[i]) += self.grad(i, 0);
  });
}

// Copy of a with a[i, cols[i]] replaced by vals[i]; the replaced entries
// take their adjoint from vals, the rest from a.
template <typename T>
Var<T> scatter_cols(const Var<T>& a, std::span<const std::uint32_t> cols, const Var<T>& vals) {
  if (static_cast<Index>(cols.size()) != a.rows() || vals.rows() != a.rows() || vals.cols() != 1) {
    throw ShapeError("scatter_cols: shapes " + shape_str(a.shape()) + " and " + shape_str(vals.shape()));
  }
  Matrix<T> v = a.value();
  for (Index i = 0; i < a.rows(); ++i) {
    if (cols[i] >= static_cast<std::size_t>(a.cols())) throw UsageError("scatter_cols: column out of range");
    v(i, cols[i]) = vals.value()(i, 0);
  }
  auto pa = a.node(), pv = vals.node();
  std::vector<std::uint32_t> idx(cols.begin(), cols.end());
  return detail::make_result<T>(std::move(v), {&a, &vals}, [pa, pv, idx = std::move(idx)](Node<T>& self) {
    if (pa->requires_grad) {
      Matrix<T> g = self.grad;
      for (std::size_t i = 0; i < idx.size(); ++i) g(static_cast<Index>(i), idx[i]) = T(0);
      pa->accumulate(g);
    }
    if (pv->requires_grad) {
      pv->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) pv->grad(static_cast<Index>(i), 0) += self.grad(i, idx[i]);
    }
  });
}

// ---------------------------------------------------------------- softmax / cross entropy

// Row-wise softmax of plain values, max-subtracted.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
  Matrix<T> p(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const T mx = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

// Per-row -log softmax(logits)[target], computed stably.
template <typename T>
std::vector<T> row_nll(const Matrix<T>& logits, std::span<const std::uint32_t> targets) {
  std::vector<T> out(static_cast<std::size_t>(logits.rows()));
  for (Index i = 0; i < logits.rows(); ++i) {
    const T mx = logits.row(i).maxCoeff();
    const T lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    out[static_cast<std::size_t>(i)] = lse - logits(i, targets[i]);
  }
  return out;
}

enum class Reduction { kSum, kMean };

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::uint32_t> targets,
                             Reduction reduction = Reduction::kMean) {
  if (static_cast<Index>(targets.size()) != logits.rows()) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  for (auto t : targets) {
    if (t >= static_cast<std::size_t>(logits.cols())) {
      throw UsageError("softmax_cross_entropy: target " + std::to_string(t) + " out of range [0, " +
                       std::to_string(logits.cols()) + ")");
    }
  }
  const T factor = reduction == Reduction::kMean ? T(1) / static_cast<T>(targets.size()) : T(1);
  Matrix<T> v(1, 1);
  if (!grad_enabled() || !logits.requires_grad()) {
    T total = T(0);
    for (T x : row_nll(logits.value(), targets)) total += x;
    v(0, 0) = total * factor;
    return Var<T>(std::move(v));
  }
  // probabilities are kept for the backward pass
  auto probs = std::make_shared<Matrix<T>>(softmax_rows(logits.value()));
  T total = T(0);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const Index r = static_cast<Index>(i);
    const T mx = logits.value().row(r).maxCoeff();
    const T lse = mx + std::log((logits.value().row(r).array() - mx).exp().sum());
    total += lse - logits.value()(r, targets[i]);
  }
  v(0, 0) = total * factor;
  auto pl = logits.node();
  std::vector<std::uint32_t> idx(targets.begin(), targets.end());
  return detail::make_result<T>(std::move(v), {&logits}, [pl, probs, idx = std::move(idx), factor](Node<T>& self) {
    Matrix<T> g = *probs;
    for (std::size_t i = 0; i < idx.size(); ++i) g(static_cast<Index>(i), idx[i]) -= T(1);
    pl->accumulate(g * (self.grad(0, 0) * factor));
  });
}

// ---------------------------------------------------------------- fused ops

// Pairwise cosine similarity between rows of A [N x d] and rows of B
// [M x d], clamped to [-1 + eps, 1 - eps]. Gradients flow through both
// directions and norms; clamped entries pass no adjoint. Zero-norm rows
// are rejected.
template <typename T>
Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b, T eps) {
  if (a.cols() != b.cols()) {
    throw ShapeError("cosine_similarity: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Matrix<T> an = a.value().rowwise().norm();
  Matrix<T> bn = b.value().rowwise().norm();
  for (Index i = 0; i < an.rows(); ++i) {
    if (!(an(i, 0) > T(0))) throw DomainError("cosine_similarity: row " + std::to_string(i) + " of first operand has zero norm");
  }
  for (Index j = 0; j < bn.rows(); ++j) {
    if (!(bn(j, 0) > T(0))) throw DomainError("cosine_similarity: row " + std::to_string(j) + " of second operand has zero norm");
  }
  Matrix<T> raw = a.value() * b.value().transpose();
  Matrix<T> inv_a = an.cwiseInverse();
  Matrix<T> inv_b = bn.cwiseInverse();
  raw.array().colwise() *= inv_a.col(0).array();
  raw.array().rowwise() *= inv_b.col(0).transpose().array();
  const T lo = T(-1) + eps, hi = T(1) - eps;
  Matrix<T> v = raw.cwiseMax(lo).cwiseMin(hi);
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(std::move(v), {&a, &b}, [pa, pb, inv_a, inv_b, lo, hi](Node<T>& self) {
    // G' = G masked to unclamped entries; P = G' / (|a_i| |b_j|)
    Matrix<T> gm = (self.value.array() > lo && self.value.array() < hi).select(self.grad, T(0));
    Matrix<T> row_dot = gm.cwiseProduct(self.value).rowwise().sum();  // [N x 1]
    Matrix<T> col_dot = gm.cwiseProduct(self.value).colwise().sum();  // [1 x M]
    gm.array().colwise() *= inv_a.col(0).array();
    gm.array().rowwise() *= inv_b.col(0).transpose().array();
    if (pa->requires_grad) {
      Matrix<T> ga = gm * pb->value;
      Matrix<T> coef = row_dot.cwiseProduct(inv_a).cwiseProduct(inv_a);
      ga -= (pa->value.array().colwise() * coef.col(0).array()).matrix();
      pa->accumulate(ga);
    }
    if (pb->requires_grad) {
      Matrix<T> gb = gm.transpose() * pa->value;
      Matrix<T> coef = col_dot.transpose().cwiseProduct(inv_b).cwiseProduct(inv_b);
      gb -= (pb->value.array().colwise() * coef.col(0).array()).matrix();
      pb->accumulate(gb);
    }
  });
}

// out[i][j] = x[i][j] * row_scale[i] * col_scale[j] (+ bias[j] when given).
// row_scale is [N x 1], col_scale and bias are [1 x M].
template <typename T>
Var<T> scale_rows_cols(const Var<T>& x, const Var<T>& row_scale, const Var<T>& col_scale, const Var<T>* bias = nullptr) {
  if (row_scale.rows() != x.rows() || row_scale.cols() != 1 || col_scale.rows() != 1 || col_scale.cols() != x.cols() ||
      (bias && (bias->rows() != 1 || bias->cols() != x.cols()))) {
    throw ShapeError("scale_rows_cols: operand " + shape_str(x.shape()) + " with scales " + shape_str(row_scale.shape()) +
                     " and " + shape_str(col_scale.shape()));
  }
  Matrix<T> v = x.value();
  v.array().colwise() *= row_scale.value().col(0).array();
  v.array().rowwise() *= col_scale.value().row(0).array();
  if (bias) v.array().rowwise() += bias->value().row(0).array();
  auto px = x.node(), pr = row_scale.node(), pc = col_scale.node();
  std::shared_ptr<Node<T>> pbias = bias ? bias->node() : nullptr;
  auto backward_fn = [px, pr, pc, pbias](Node<T>& self) {
    const auto& r = pr->value;
    const auto& c = pc->value;
    if (px->requires_grad) {
      Matrix<T> g = self.grad;
      g.array().colwise() *= r.col(0).array();
      g.array().rowwise() *= c.row(0).array();
      px->accumulate(g);
    }
    if (pr->requires_grad || pc->requires_grad) {
      Matrix<T> gx = self.grad.cwiseProduct(px->value);
      if (pr->requires_grad) pr->accumulate(gx * c.transpose());
      if (pc->requires_grad) pc->accumulate(r.transpose() * gx);
    }
    if (pbias && pbias->requires_grad) pbias->accumulate(self.grad.colwise().sum());
  };
  if (bias) return detail::make_result<T>(std::move(v), {&x, &row_scale, &col_scale, bias}, std::move(backward_fn));
  return detail::make_result<T>(std::move(v), {&x, &row_scale, &col_scale}, std::move(backward_fn));
}

// ---------------------------------------------------------------- gradient check

// Max over all input coordinates of |analytic - central difference| /
// max(1, |analytic|, |numeric|). fn must return a 1x1 Var.
template <typename T, typename Fn>
T grad_check(Fn&& fn, const std::vector<Matrix<T>>& inputs, T epsilon) {
  static_assert(std::is_same_v<T, double>, "grad_check requires 64-bit scalars");
  std::vector<Var<T>> vars;
  for (const auto& m : inputs) vars.push_back(parameter<T>(m));
  Var<T> out = fn(std::span<const Var<T>>(vars));
  if (out.rows() != 1 || out.cols() != 1) {
    throw ShapeError("grad_check: function output must be scalar, got " + shape_str(out.shape()));
  }
  backward(out);

  T worst = T(0);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Matrix<T> analytic = vars[k].has_grad() ? vars[k].grad() : Matrix<T>::Zero(inputs[k].rows(), inputs[k].cols());
    for (Index i = 0; i < inputs[k].size(); ++i) {
      auto eval_at = [&](T delta) {
        NoGradGuard guard;
        std::vector<Var<T>> probe;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Matrix<T> m = inputs[j];
          if (j == k) m.data()[i] += delta;
          probe.push_back(constant<T>(std::move(m)));
        }
        return fn(std::span<const Var<T>>(probe)).item();
      };
      const T numeric = (eval_at(epsilon) - eval_at(-epsilon)) / (T(2) * epsilon);
      const T a = analytic.data()[i];
      const T err = std::abs(a - numeric) / std::max({T(1), std::abs(a), std::abs(numeric)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace marginlm
