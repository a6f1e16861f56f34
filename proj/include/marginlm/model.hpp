#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "marginlm/corpus.hpp"
#include "marginlm/error.hpp"
#include "marginlm/numerics.hpp"
#include "marginlm/rng.hpp"

namespace marginlm {

struct ModelDims {
  std::size_t vocab = 0;
  std::size_t d_emb = 0;
  std::size_t d_h = 0;
  std::size_t layers = 2;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

// Gate columns are laid out [input | forget | candidate | output], d_h each.
template <typename T>
struct LstmLayer {
  Var<T> w_x;   // [d_in x 4 d_h]
  Var<T> w_h;   // [d_h x 4 d_h]
  Var<T> bias;  // [1 x 4 d_h]
};

template <typename T>
struct LmModel {
  ModelDims dims;
  Var<T> embedding;  // [V x d_emb]
  std::vector<LstmLayer<T>> lstm;
  Var<T> W;  // output word vectors [V x d_h]
  Var<T> b;  // output bias [1 x V]

  // Stable order; checkpoints store arrays in this order.
  std::vector<std::pair<std::string, Var<T>*>> named_parameters() {
    std::vector<std::pair<std::string, Var<T>*>> out;
    out.emplace_back("embedding", &embedding);
    for (std::size_t l = 0; l < lstm.size(); ++l) {
      const std::string p = "lstm" + std::to_string(l) + ".";
      out.emplace_back(p + "w_x", &lstm[l].w_x);
      out.emplace_back(p + "w_h", &lstm[l].w_h);
      out.emplace_back(p + "bias", &lstm[l].bias);
    }
    out.emplace_back("output.W", &W);
    out.emplace_back("output.b", &b);
    return out;
  }

  std::vector<Var<T>*> parameters() {
    std::vector<Var<T>*> out;
    for (auto& [name, v] : named_parameters()) out.push_back(v);
    return out;
  }

  void zero_grad() {
    for (Var<T>* p : parameters()) p->zero_grad();
  }

  bool all_finite() {
    for (Var<T>* p : parameters()) {
      if (!p->value().allFinite()) return false;
    }
    return true;
  }
};

// Uniform init in [-r, r], r = 1/sqrt(d_h), for every weight matrix; LSTM
// biases zero except the forget gate (1.0); output bias zero.
template <typename T>
LmModel<T> init_model(const ModelDims& dims, std::uint64_t seed) {
  if (dims.vocab == 0 || dims.d_emb == 0 || dims.d_h == 0 || dims.layers == 0) {
    throw UsageError("init_model: dimensions must be positive");
  }
  Rng rng(seed);
  const double r = 1.0 / std::sqrt(static_cast<double>(dims.d_h));
  auto uniform = [&](std::size_t rows, std::size_t cols) {
    Matrix<T> m(static_cast<Index>(rows), static_cast<Index>(cols));
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-r, r));
    return m;
  };
  const auto d = static_cast<Index>(dims.d_h);
  LmModel<T> model;
  model.dims = dims;
  model.embedding = parameter<T>(uniform(dims.vocab, dims.d_emb));
  for (std::size_t l = 0; l < dims.layers; ++l) {
    const std::size_t d_in = l == 0 ? dims.d_emb : dims.d_h;
    LstmLayer<T> layer;
    layer.w_x = parameter<T>(uniform(d_in, 4 * dims.d_h));
    layer.w_h = parameter<T>(uniform(dims.d_h, 4 * dims.d_h));
    Matrix<T> bias = Matrix<T>::Zero(1, 4 * d);
    bias.middleCols(d, d).setConstant(T(1));
    layer.bias = parameter<T>(std::move(bias));
    model.lstm.push_back(std::move(layer));
  }
  model.W = parameter<T>(uniform(dims.vocab, dims.d_h));
  model.b = parameter<T>(Matrix<T>::Zero(1, static_cast<Index>(dims.vocab)));
  return model;
}

// Per-layer (cell, hidden), each [num_streams x d_h].
template <typename T>
struct LstmState {
  std::vector<Var<T>> cell;
  std::vector<Var<T>> hidden;

  static LstmState zeros(const ModelDims& dims, std::size_t num_streams) {
    LstmState s;
    const auto rows = static_cast<Index>(num_streams);
    const auto cols = static_cast<Index>(dims.d_h);
    for (std::size_t l = 0; l < dims.layers; ++l) {
      s.cell.push_back(constant<T>(Matrix<T>::Zero(rows, cols)));
      s.hidden.push_back(constant<T>(Matrix<T>::Zero(rows, cols)));
    }
    return s;
  }

  // Same values, no gradient path into the previous segment.
  LstmState detached() const {
    LstmState s;
    for (const auto& c : cell) s.cell.push_back(stop_gradient(c));
    for (const auto& h : hidden) s.hidden.push_back(stop_gradient(h));
    return s;
  }

  std::size_t num_streams() const { return hidden.empty() ? 0 : static_cast<std::size_t>(hidden[0].rows()); }
};

struct ForwardOptions {
  double dropout = 0.0;  // inverted dropout on embeddings and layer outputs
  Rng* rng = nullptr;    // required when dropout > 0
};

template <typename T>
struct ForwardResult {
  Var<T> H;  // [length * num_streams x d_h], row t * num_streams + s
  LstmState<T> state;
};

// Flattens [num_streams x length] ids into the time-major row order used by H.
inline std::vector<WordId> time_major(std::span<const WordId> ids, std::size_t num_streams, std::size_t length) {
  std::vector<WordId> out(ids.size());
  for (std::size_t s = 0; s < num_streams; ++s) {
    for (std::size_t t = 0; t < length; ++t) out[t * num_streams + s] = ids[s * length + t];
  }
  return out;
}

template <typename T>
Var<T> dropout_layer(const Var<T>& x, const ForwardOptions& opts) {
  if (opts.dropout <= 0.0) return x;
  if (opts.rng == nullptr) throw UsageError("dropout requires an rng");
  const T keep = T(1.0 - opts.dropout);
  Matrix<T> m(x.rows(), x.cols());
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = opts.rng->uniform() < opts.dropout ? T(0) : T(1) / keep;
  return mask(x, m);
}

template <typename T>
ForwardResult<T> forward(const LmModel<T>& model, const Batch& batch, const LstmState<T>& state,
                         const ForwardOptions& opts = {}) {
  const std::size_t S = batch.num_streams;
  const std::size_t L = batch.length;
  if (state.num_streams() != S || state.hidden.size() != model.lstm.size()) {
    throw ShapeError("forward: state does not match batch (" + std::to_string(state.num_streams()) + " vs " +
                     std::to_string(S) + " streams)");
  }
  const auto ids = time_major(batch.inputs, S, L);
  for (WordId id : ids) {
    if (id >= model.dims.vocab) {
      throw UsageError("forward: input id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(model.dims.vocab) + ")");
    }
  }
  const auto d = static_cast<Index>(model.dims.d_h);
  const auto rows = static_cast<Index>(S);

  Var<T> x = dropout_layer(gather_rows(model.embedding, std::span<const std::uint32_t>(ids)), opts);
  ForwardResult<T> out;
  for (std::size_t l = 0; l < model.lstm.size(); ++l) {
    const auto& layer = model.lstm[l];
    Var<T> projected = add(matmul(x, layer.w_x), layer.bias);
    Var<T> h = state.hidden[l];
    Var<T> c = state.cell[l];
    std::vector<Var<T>> outputs;
    outputs.reserve(L);
    for (std::size_t t = 0; t < L; ++t) {
      const auto r0 = static_cast<Index>(t) * rows;
      Var<T> gates = add(slice(projected, 0, r0, r0 + rows), matmul(h, layer.w_h));
      Var<T> in_gate = sigmoid(slice(gates, 1, 0, d));
      Var<T> forget_gate = sigmoid(slice(gates, 1, d, 2 * d));
      Var<T> candidate = tanh(slice(gates, 1, 2 * d, 3 * d));
      Var<T> out_gate = sigmoid(slice(gates, 1, 3 * d, 4 * d));
      c = add(mul(forget_gate, c), mul(in_gate, candidate));
      h = mul(out_gate, tanh(c));
      outputs.push_back(h);
    }
    out.state.cell.push_back(c);
    out.state.hidden.push_back(h);
    x = dropout_layer(concat(outputs, 0), opts);
  }
  out.H = x;
  return out;
}

}  // namespace marginlm
