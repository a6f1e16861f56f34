#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "marginlm/margin_head.hpp"
#include "marginlm/numerics.hpp"
#include "marginlm/rng.hpp"

using namespace marginlm;
using M = Matrix<double>;
using V = Var<double>;
using Fn = std::function<V(std::span<const V>)>;

namespace {

M random(Index r, Index c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  M m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

// weights the output so the check sees every output coordinate
V weighted_sum(const V& x, Rng& rng) { return sum(mul(x, constant<double>(random(x.rows(), x.cols(), rng)))); }

}  // namespace

TEST(Softmax, UniformLogits) {
  const M logits = M::Zero(1, 4);
  const M p = softmax_rows(logits);
  for (Index j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(p(0, j), 0.25);
  for (std::uint32_t t = 0; t < 4; ++t) {
    const std::uint32_t tg[] = {t};
    const V loss = softmax_cross_entropy(constant<double>(logits), std::span<const std::uint32_t>(tg));
    EXPECT_NEAR(loss.item(), std::log(4.0), 1e-15);
  }
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(1);
  const M logits = random(20, 50, rng, -30, 30);
  const M p = softmax_rows(logits);
  for (Index i = 0; i < p.rows(); ++i) EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-12);
}

TEST(Softmax, CrossEntropyIsNegLogOfPosterior) {
  Rng rng(2);
  const M logits = random(3, 6, rng, -5, 5);
  const std::uint32_t tg[] = {0, 5, 2};
  const V loss = softmax_cross_entropy(constant<double>(logits), std::span<const std::uint32_t>(tg), Reduction::kSum);
  double expected = 0;
  for (Index i = 0; i < 3; ++i) {
    double z = 0;
    for (Index j = 0; j < 6; ++j) z += std::exp(logits(i, j));
    expected -= std::log(std::exp(logits(i, tg[i])) / z);
  }
  EXPECT_NEAR(loss.item(), expected, 1e-12);
}

TEST(Softmax, StableForHugeLogits) {
  M logits(1, 3);
  logits << 1000.0, 1000.0, -1000.0;
  const std::uint32_t tg[] = {0};
  const V loss = softmax_cross_entropy(constant<double>(logits), std::span<const std::uint32_t>(tg));
  EXPECT_NEAR(loss.item(), std::log(2.0), 1e-12);
}

TEST(Ops, NormOfThreeFour) {
  M x(1, 2);
  x << 3.0, 4.0;
  EXPECT_DOUBLE_EQ(norm_l2(constant<double>(x), 1).item(), 5.0);
  EXPECT_DOUBLE_EQ(norm_l2(constant<double>(M(x.transpose())), 0).item(), 5.0);
}

TEST(Ops, XCosXDerivative) {
  M x(1, 1);
  x(0, 0) = 1.0;
  V xv = parameter<double>(x);
  V y = mul(xv, cos(xv));
  backward(y);
  const double analytic = xv.grad()(0, 0);
  const double h = 1e-5;
  const double numeric = ((1 + h) * std::cos(1 + h) - (1 - h) * std::cos(1 - h)) / (2 * h);
  EXPECT_NEAR(analytic, numeric, 1e-8 * std::abs(numeric));
  EXPECT_NEAR(analytic, std::cos(1.0) - std::sin(1.0), 1e-15);
}

TEST(GradCheck, QuadraticForm) {
  Rng rng(4);
  const M A = random(5, 5, rng);
  const M x = random(5, 1, rng);
  Fn f = [&](std::span<const V> in) { return sum(mul(in[0], matmul(constant<double>(A), in[0]))); };
  EXPECT_LT(grad_check<double>(f, {x}, 1e-5), 1e-9);
  V xv = parameter<double>(x);
  backward(f(std::span<const V>(&xv, 1)));
  const M oracle = (A + A.transpose()) * x;
  EXPECT_LT((xv.grad() - oracle).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
  Fn f = [](std::span<const V> in) { return add_scalar(scale(sum(in[0]), 0.0), 3.0); };
  EXPECT_EQ(grad_check<double>(f, {M::Ones(2, 3)}, 1e-5), 0.0);
}

TEST(GradCheck, NonScalarOutputThrows) {
  Fn f = [](std::span<const V> in) { return in[0]; };
  EXPECT_THROW(grad_check<double>(f, {M::Ones(2, 2)}, 1e-5), ShapeError);
}

TEST(GradCheck, MarginHeadLossEightWords) {
  Rng rng(8);
  const M H = random(4, 6, rng), W = random(8, 6, rng), b = random(1, 8, rng, -0.1, 0.1);
  const std::vector<std::uint32_t> targets{1, 7, 3, 3};
  HeadConfig c;
  c.family = MarginFamily::kArc;
  c.m = 0.2;
  c.f_mode = WordNormMode::kLogUnigram;
  c.g_mode = ContextNormMode::kMaxNorm;
  const std::vector<std::uint64_t> counts{40, 30, 20, 10, 5, 3, 2, 1};
  const auto scales = head_scales<double>(H, W, counts, c);
  Fn f = [&](std::span<const V> in) {
    return softmax_cross_entropy(head_logits(in[0], in[1], in[2], targets, c, true, scales), targets);
  };
  EXPECT_LT(grad_check<double>(f, {H, W, b}, 1e-5), 1e-4);
}

struct OpCase {
  const char* name;
  std::vector<M> inputs;
  Fn fn;
};

TEST(GradCheck, EveryOpOnRandomInputs) {
  Rng rng(11);
  auto pos = [&](Index r, Index c) { return random(r, c, rng, 0.5, 2.0); };
  auto any = [&](Index r, Index c) { return random(r, c, rng); };
  Rng wr(99);
  const std::vector<std::uint32_t> idx{2, 0, 2};
  std::vector<OpCase> cases;
  cases.push_back({"matmul", {any(3, 4), any(4, 2)}, [&](auto in) { return weighted_sum(matmul(in[0], in[1]), wr); }});
  cases.push_back({"matmul_nt", {any(3, 4), any(5, 4)}, [&](auto in) { return weighted_sum(matmul_nt(in[0], in[1]), wr); }});
  cases.push_back({"transpose", {any(3, 4)}, [&](auto in) { return weighted_sum(transpose(in[0]), wr); }});
  cases.push_back({"add", {any(3, 4), any(1, 4)}, [&](auto in) { return weighted_sum(add(in[0], in[1]), wr); }});
  cases.push_back({"add_col", {any(3, 4), any(3, 1)}, [&](auto in) { return weighted_sum(add(in[0], in[1]), wr); }});
  cases.push_back({"sub", {any(3, 4), any(3, 4)}, [&](auto in) { return weighted_sum(sub(in[0], in[1]), wr); }});
  cases.push_back({"mul", {any(3, 4), any(3, 1)}, [&](auto in) { return weighted_sum(mul(in[0], in[1]), wr); }});
  cases.push_back({"div", {any(3, 4), pos(1, 4)}, [&](auto in) { return weighted_sum(div(in[0], in[1]), wr); }});
  cases.push_back({"scale", {any(2, 3)}, [&](auto in) { return weighted_sum(scale(in[0], 1.7), wr); }});
  cases.push_back({"exp", {any(2, 3)}, [&](auto in) { return weighted_sum(exp(in[0]), wr); }});
  cases.push_back({"log", {pos(2, 3)}, [&](auto in) { return weighted_sum(log(in[0]), wr); }});
  cases.push_back({"sqrt", {pos(2, 3)}, [&](auto in) { return weighted_sum(sqrt(in[0]), wr); }});
  cases.push_back({"cos", {any(2, 3)}, [&](auto in) { return weighted_sum(cos(in[0]), wr); }});
  cases.push_back({"arccos", {random(2, 3, rng, -0.9, 0.9)}, [&](auto in) { return weighted_sum(arccos(in[0]), wr); }});
  cases.push_back({"sigmoid", {any(2, 3)}, [&](auto in) { return weighted_sum(sigmoid(in[0]), wr); }});
  cases.push_back({"tanh", {any(2, 3)}, [&](auto in) { return weighted_sum(tanh(in[0]), wr); }});
  cases.push_back({"clamp", {random(2, 3, rng, -0.4, 0.4)}, [&](auto in) { return weighted_sum(clamp(in[0], -0.5, 0.5), wr); }});
  cases.push_back({"sum", {any(2, 3)}, [&](auto in) { return scale(sum(in[0]), 0.3); }});
  cases.push_back({"mean", {any(2, 3)}, [&](auto in) { return mean(in[0]); }});
  cases.push_back({"norm_rows", {any(3, 4)}, [&](auto in) { return weighted_sum(norm_l2(in[0], 1), wr); }});
  cases.push_back({"norm_cols", {any(3, 4)}, [&](auto in) { return weighted_sum(norm_l2(in[0], 0), wr); }});
  cases.push_back({"concat0", {any(2, 3), any(1, 3)}, [&](auto in) { return weighted_sum(concat<double>({in[0], in[1]}, 0), wr); }});
  cases.push_back({"concat1", {any(2, 3), any(2, 2)}, [&](auto in) { return weighted_sum(concat<double>({in[0], in[1]}, 1), wr); }});
  cases.push_back({"slice", {any(4, 5)}, [&](auto in) { return weighted_sum(slice(in[0], 1, 1, 4), wr); }});
  cases.push_back({"gather_rows", {any(4, 3)}, [&](auto in) { return weighted_sum(gather_rows(in[0], idx), wr); }});
  cases.push_back({"gather_cols", {any(3, 4)}, [&](auto in) { return weighted_sum(gather_cols(in[0], idx), wr); }});
  cases.push_back({"scatter_cols", {any(3, 4), any(3, 1)},
                   [&](auto in) { return weighted_sum(scatter_cols(in[0], idx, in[1]), wr); }});
  cases.push_back({"cosine_similarity", {any(3, 4), any(5, 4)},
                   [&](auto in) { return weighted_sum(cosine_similarity(in[0], in[1], 1e-7), wr); }});
  cases.push_back({"scale_rows_cols", {any(3, 4), pos(3, 1), pos(1, 4), any(1, 4)},
                   [&](auto in) { return weighted_sum(scale_rows_cols(in[0], in[1], in[2], &in[3]), wr); }});
  cases.push_back({"softmax_cross_entropy", {random(3, 5, rng, -2, 2)}, [&](auto in) {
                     return softmax_cross_entropy(in[0], idx, Reduction::kMean);
                   }});
  for (auto& c : cases) {
    // the weights must be identical across the probes of one check
    wr = Rng(99);
    Fn fn = [&](std::span<const V> in) {
      wr = Rng(99);
      return c.fn(in);
    };
    EXPECT_LT(grad_check<double>(fn, c.inputs, 1e-5), 1e-6) << c.name;
  }
}

TEST(Autodiff, BackwardAccumulates) {
  Rng rng(3);
  V x = parameter<double>(random(2, 2, rng));
  V y = sum(mul(x, x));
  backward(y);
  const M g1 = x.grad();
  backward(y);
  EXPECT_LT((x.grad() - 2 * g1).cwiseAbs().maxCoeff(), 1e-15);
  x.zero_grad();
  EXPECT_EQ(x.grad().cwiseAbs().maxCoeff(), 0.0);
}

TEST(Autodiff, GradShapeMatchesValue) {
  Rng rng(3);
  V a = parameter<double>(random(3, 4, rng));
  V b = parameter<double>(random(1, 4, rng));
  backward(sum(tanh(add(a, b))));
  EXPECT_EQ(a.grad().rows(), 3);
  EXPECT_EQ(a.grad().cols(), 4);
  EXPECT_EQ(b.grad().rows(), 1);
  EXPECT_EQ(b.grad().cols(), 4);
}

TEST(Autodiff, Linearity) {
  Rng rng(6);
  const M x0 = random(2, 3, rng);
  auto grad_of = [&](const std::function<V(const V&)>& fn) {
    V x = parameter<double>(x0);
    backward(fn(x));
    return M(x.grad());
  };
  auto f = [](const V& x) { return sum(exp(x)); };
  auto g = [](const V& x) { return sum(mul(x, sigmoid(x))); };
  const double a = 0.7, b = -1.3;
  const M combined = grad_of([&](const V& x) { return add(scale(f(x), a), scale(g(x), b)); });
  const M separate = a * grad_of(f) + b * grad_of(g);
  EXPECT_LT((combined - separate).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Autodiff, StopGradient) {
  Rng rng(7);
  V x = parameter<double>(random(2, 2, rng));
  V s = stop_gradient(x);
  EXPECT_EQ(s.value(), x.value());
  backward(add(sum(mul(s, s)), sum(x)));
  EXPECT_LT((x.grad() - M::Ones(2, 2)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
  V x = parameter<double>(M::Ones(2, 2));
  V y;
  {
    NoGradGuard g;
    y = sum(mul(x, x));
  }
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autodiff, Deterministic) {
  auto run = [] {
    Rng rng(12);
    V a = parameter<double>(random(30, 20, rng));
    V b = parameter<double>(random(20, 10, rng));
    backward(sum(tanh(matmul(a, b))));
    return std::pair<M, M>(a.grad(), b.grad());
  };
  const auto r1 = run(), r2 = run();
  EXPECT_EQ(r1.first, r2.first);
  EXPECT_EQ(r1.second, r2.second);
}

TEST(Errors, ShapeMismatchNamesBothShapes) {
  try {
    add(constant<double>(M::Ones(2, 3)), constant<double>(M::Ones(4, 5)));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
  }
  EXPECT_THROW(matmul(constant<double>(M::Ones(2, 3)), constant<double>(M::Ones(2, 3))), ShapeError);
}

TEST(Errors, DomainViolations) {
  EXPECT_THROW(log(constant<double>(M::Constant(1, 2, -1.0))), DomainError);
  EXPECT_THROW(log(constant<double>(M::Zero(1, 2))), DomainError);
  EXPECT_THROW(arccos(constant<double>(M::Constant(1, 1, 1.5))), DomainError);
  EXPECT_THROW(sqrt(constant<double>(M::Constant(1, 1, -0.1))), DomainError);
  EXPECT_NO_THROW(arccos(constant<double>(M::Constant(1, 1, 1.0))));
}

TEST(Errors, CrossEntropyTargetRange) {
  const std::uint32_t tg[] = {5};
  EXPECT_THROW(softmax_cross_entropy(constant<double>(M::Zero(1, 5)), std::span<const std::uint32_t>(tg)), UsageError);
}
