#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "marginlm/corpus.hpp"
#include "marginlm/error.hpp"
#include "marginlm/margin_head.hpp"
#include "marginlm/model.hpp"
#include "marginlm/numerics.hpp"
#include "marginlm/rng.hpp"

namespace marginlm {

enum class OptimizerKind { kSgd, kAdam };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw UsageError("unknown optimizer '" + std::string(s) + "' (expected sgd, adam)");
}

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double grad_clip_norm = 5.0;
  std::size_t epochs = 5;
  std::size_t bptt_len = 35;
  std::size_t num_streams = 20;
  std::uint64_t seed = 1;
  double lr_decay = 0.5;  // applied when validation perplexity fails to improve
  double dropout = 0.0;
  std::size_t eval_streams = 1;
  std::size_t eval_bptt_len = 35;

  void validate() const {
    if (!(learning_rate > 0.0)) throw UsageError("learning rate must be positive");
    if (!(grad_clip_norm > 0.0)) throw UsageError("gradient clip norm must be positive");
    if (epochs == 0) throw UsageError("epochs must be positive");
    if (bptt_len == 0 || num_streams == 0) throw UsageError("bptt length and stream count must be positive");
    if (eval_bptt_len == 0 || eval_streams == 0) throw UsageError("evaluation bptt length and stream count must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw UsageError("lr decay must be in (0, 1]");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw UsageError("dropout must be in [0, 1)");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"optimizer", std::string(to_string(c.optimizer))},
                     {"learning_rate", c.learning_rate},
                     {"grad_clip_norm", c.grad_clip_norm},
                     {"epochs", c.epochs},
                     {"bptt_len", c.bptt_len},
                     {"num_streams", c.num_streams},
                     {"seed", c.seed},
                     {"lr_decay", c.lr_decay},
                     {"dropout", c.dropout},
                     {"eval_streams", c.eval_streams},
                     {"eval_bptt_len", c.eval_bptt_len}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.optimizer = parse_optimizer(j.value("optimizer", std::string(to_string(d.optimizer))));
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.grad_clip_norm = j.value("grad_clip_norm", d.grad_clip_norm);
  c.epochs = j.value("epochs", d.epochs);
  c.bptt_len = j.value("bptt_len", d.bptt_len);
  c.num_streams = j.value("num_streams", d.num_streams);
  c.seed = j.value("seed", d.seed);
  c.lr_decay = j.value("lr_decay", d.lr_decay);
  c.dropout = j.value("dropout", d.dropout);
  c.eval_streams = j.value("eval_streams", d.eval_streams);
  c.eval_bptt_len = j.value("eval_bptt_len", d.eval_bptt_len);
}

struct EvalReport {
  double total_log_prob = 0.0;  // natural log
  std::uint64_t token_count = 0;
  double perplexity = 0.0;
};

inline EvalReport make_report(double total_log_prob, std::uint64_t tokens) {
  if (tokens == 0) throw UsageError("perplexity of zero tokens");
  return {total_log_prob, tokens, std::exp(-total_log_prob / static_cast<double>(tokens))};
}

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double train_ppl = 0.0;
  double valid_ppl = std::numeric_limits<double>::quiet_NaN();
  double learning_rate = 0.0;
};

// ---------------------------------------------------------------- optimizers

// Adam (beta1 0.9, beta2 0.999, eps 1e-8) or plain SGD over a fixed
// parameter list.
template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, std::vector<Var<T>*> params, double lr)
      : kind_(kind), params_(std::move(params)), lr_(lr) {
    for (Var<T>* p : params_) {
      m_.push_back(Matrix<T>::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix<T>::Zero(p->rows(), p->cols()));
    }
  }

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }

  void step() {
    ++t_;
    const T lr = static_cast<T>(lr_);
    if (kind_ == OptimizerKind::kSgd) {
      for (Var<T>* p : params_) {
        if (p->has_grad()) p->mutable_value() -= lr * p->grad();
      }
      return;
    }
    const T b1 = T(0.9), b2 = T(0.999), eps = T(1e-8);
    const T c1 = T(1) - static_cast<T>(std::pow(0.9, static_cast<double>(t_)));
    const T c2 = T(1) - static_cast<T>(std::pow(0.999, static_cast<double>(t_)));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Var<T>* p = params_[i];
      if (!p->has_grad()) continue;
      m_[i] = b1 * m_[i] + (T(1) - b1) * p->grad();
      v_[i] = b2 * v_[i] + (T(1) - b2) * p->grad().cwiseProduct(p->grad());
      p->mutable_value().array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
    }
  }

 private:
  OptimizerKind kind_;
  std::vector<Var<T>*> params_;
  double lr_;
  std::vector<Matrix<T>> m_, v_;
  std::uint64_t t_ = 0;
};

// Rescales all gradients so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<Var<T>* const> params, double max_norm) {
  double sq = 0.0;
  for (Var<T>* p : params) {
    if (p->has_grad()) sq += static_cast<double>(p->grad().squaredNorm());
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (Var<T>* p : params) {
      if (p->has_grad()) p->mutable_grad() *= factor;
    }
  }
  return norm;
}

// ---------------------------------------------------------------- evaluation

// Perplexity over every predicted position of ids (all tokens after the
// first, sentence boundaries included), using the full softmax over head
// logits. The margin is applied only if config.eval_with_margin.
template <typename T>
EvalReport evaluate_ppl(const LmModel<T>& model, std::span<const std::uint64_t> counts, std::span<const WordId> ids,
                        const HeadConfig& config, std::size_t num_streams = 1, std::size_t bptt_len = 35) {
  if (ids.size() < 2) throw UsageError("evaluate_ppl: empty split");
  NoGradGuard no_grad;
  std::size_t streams = std::max<std::size_t>(num_streams, 1);
  while (streams > 1 && ids.size() < 2 * streams) --streams;
  const std::size_t bptt = std::min(bptt_len, ids.size() / streams - 1);
  auto batches = make_batches(ids, streams, bptt, /*keep_partial=*/true);
  auto state = LstmState<T>::zeros(model.dims, streams);
  double total = 0.0;
  std::uint64_t tokens = 0;
  for (const auto& batch : batches) {
    auto fwd = forward(model, batch, state);
    const auto targets = time_major(batch.targets, batch.num_streams, batch.length);
    Var<T> logits = head_logits(fwd.H, model.W, model.b, std::span<const std::uint32_t>(targets), counts, config,
                                /*training=*/false);
    for (T nll : row_nll(logits.value(), std::span<const std::uint32_t>(targets))) total -= static_cast<double>(nll);
    tokens += targets.size();
    state = fwd.state;
  }
  return make_report(total, tokens);
}

// Add-one smoothed unigram model estimated from the vocabulary counts.
inline EvalReport unigram_ppl(const Vocabulary& vocab, std::span<const WordId> ids) {
  if (ids.size() < 2) throw UsageError("unigram_ppl: empty split");
  double n = 0.0;
  for (auto c : vocab.counts()) n += static_cast<double>(c);
  const double denom = n + static_cast<double>(vocab.size());
  double total = 0.0;
  for (std::size_t i = 1; i < ids.size(); ++i) total += std::log((static_cast<double>(vocab.count(ids[i])) + 1.0) / denom);
  return make_report(total, ids.size() - 1);
}

// ---------------------------------------------------------------- training

struct TrainResult {
  std::vector<EpochMetrics> epochs;
};

// Called after each epoch; returning false stops training early.
using EpochCallback = std::function<bool(const EpochMetrics&)>;

template <typename T>
TrainResult train(LmModel<T>& model, const Vocabulary& vocab, std::span<const WordId> train_ids,
                  std::span<const WordId> valid_ids, const HeadConfig& head, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {}) {
  head.validate();
  cfg.validate();
  if (model.dims.vocab != vocab.size()) {
    throw UsageError("train: model vocabulary " + std::to_string(model.dims.vocab) + " != " +
                     std::to_string(vocab.size()));
  }
  const auto counts = vocab.counts();
  auto batches = make_batches(train_ids, cfg.num_streams, cfg.bptt_len);
  auto params = model.parameters();
  Optimizer<T> opt(cfg.optimizer, params, cfg.learning_rate);
  Rng dropout_rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
  ForwardOptions fwd_opts{cfg.dropout, &dropout_rng};

  TrainResult result;
  double best_valid = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto state = LstmState<T>::zeros(model.dims, cfg.num_streams);
    double epoch_nll = 0.0;
    std::uint64_t epoch_tokens = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const Batch& batch = batches[bi];
      auto fwd = forward(model, batch, state, fwd_opts);
      const auto targets = time_major(batch.targets, batch.num_streams, batch.length);
      std::span<const std::uint32_t> tspan(targets);
      Var<T> logits = head_logits(fwd.H, model.W, model.b, tspan, counts, head, /*training=*/true);
      Var<T> loss = softmax_cross_entropy(logits, tspan, Reduction::kMean);
      const double loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi));
      }
      model.zero_grad();
      backward(loss);
      clip_grad_norm<T>(params, cfg.grad_clip_norm);
      opt.step();
      if (!model.all_finite()) {
        throw TrainingError("non-finite parameters after epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(bi));
      }
      epoch_nll += loss_value * static_cast<double>(targets.size());
      epoch_tokens += targets.size();
      state = fwd.state.detached();
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_ppl = std::exp(epoch_nll / static_cast<double>(epoch_tokens));
    m.learning_rate = opt.learning_rate();
    if (!valid_ids.empty()) {
      m.valid_ppl = evaluate_ppl(model, counts, valid_ids, head, cfg.eval_streams, cfg.eval_bptt_len).perplexity;
      if (!(m.valid_ppl < best_valid)) opt.set_learning_rate(opt.learning_rate() * cfg.lr_decay);
      best_valid = std::min(best_valid, m.valid_ppl);
    }
    result.epochs.push_back(m);
    if (on_epoch && !on_epoch(m)) break;
  }
  return result;
}

// epoch<TAB>train_ppl<TAB>valid_ppl with a header row; full precision.
inline void write_metrics_tsv(std::ostream& out, std::span<const EpochMetrics> epochs) {
  out << "epoch\ttrain_ppl\tvalid_ppl\n";
  char buf[64];
  for (const auto& e : epochs) {
    out << e.epoch;
    std::snprintf(buf, sizeof buf, "\t%.17g", e.train_ppl);
    out << buf;
    std::snprintf(buf, sizeof buf, "\t%.17g", e.valid_ppl);
    out << buf << '\n';
  }
}

}  // namespace marginlm
