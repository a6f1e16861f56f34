#pragma once

// Output head of the language model: logits l(y, i) = g(i) f(y) phi(theta) + b_y
// where theta is the angle between context vector h_i and word vector W_y,
// phi is the plain cosine for non-target words and a margin-penalized
// cosine for the target word, and f/g optionally replace the word/context
// vector norms.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "marginlm/error.hpp"
#include "marginlm/numerics.hpp"

namespace marginlm {

enum class MarginFamily { kNone, kCos, kArc, kLsm };
enum class WordNormMode { kNoMod, kUniform, kLogRank, kUnigram, kLogUnigram };
enum class ContextNormMode { kNoMod, kMaxNorm };

// cos(theta) is kept inside [-1 + eps, 1 - eps] wherever it feeds arccos or phi.
inline constexpr double kCosineClamp = 1e-7;
// log-unigram norms are floored so count-1 words keep a live logit.
inline constexpr double kLogUnigramFloor = 1e-3;

inline std::string_view to_string(MarginFamily f) {
  switch (f) {
    case MarginFamily::kNone: return "none";
    case MarginFamily::kCos: return "cos";
    case MarginFamily::kArc: return "arc";
    case MarginFamily::kLsm: return "lsm";
  }
  return "?";
}

inline std::string_view to_string(WordNormMode f) {
  switch (f) {
    case WordNormMode::kNoMod: return "no-mod";
    case WordNormMode::kUniform: return "uniform";
    case WordNormMode::kLogRank: return "log-rank";
    case WordNormMode::kUnigram: return "unigram";
    case WordNormMode::kLogUnigram: return "log-unigram";
  }
  return "?";
}

inline std::string_view to_string(ContextNormMode g) {
  return g == ContextNormMode::kNoMod ? "no-mod" : "max-norm";
}

inline MarginFamily parse_margin_family(std::string_view s) {
  if (s == "none") return MarginFamily::kNone;
  if (s == "cos") return MarginFamily::kCos;
  if (s == "arc") return MarginFamily::kArc;
  if (s == "lsm") return MarginFamily::kLsm;
  throw UsageError("unknown margin family '" + std::string(s) + "' (expected none, cos, arc, lsm)");
}

inline WordNormMode parse_word_norm_mode(std::string_view s) {
  if (s == "no-mod") return WordNormMode::kNoMod;
  if (s == "uniform") return WordNormMode::kUniform;
  if (s == "log-rank") return WordNormMode::kLogRank;
  if (s == "unigram") return WordNormMode::kUnigram;
  if (s == "log-unigram") return WordNormMode::kLogUnigram;
  throw UsageError("unknown f-mode '" + std::string(s) + "' (expected no-mod, uniform, log-rank, unigram, log-unigram)");
}

inline ContextNormMode parse_context_norm_mode(std::string_view s) {
  if (s == "no-mod") return ContextNormMode::kNoMod;
  if (s == "max-norm") return ContextNormMode::kMaxNorm;
  throw UsageError("unknown g-mode '" + std::string(s) + "' (expected no-mod, max-norm)");
}

inline constexpr MarginFamily kAllMarginFamilies[] = {MarginFamily::kNone, MarginFamily::kCos, MarginFamily::kArc,
                                                      MarginFamily::kLsm};
inline constexpr WordNormMode kAllWordNormModes[] = {WordNormMode::kNoMod, WordNormMode::kUniform,
                                                     WordNormMode::kLogRank, WordNormMode::kUnigram,
                                                     WordNormMode::kLogUnigram};
inline constexpr ContextNormMode kAllContextNormModes[] = {ContextNormMode::kNoMod, ContextNormMode::kMaxNorm};

struct HeadConfig {
  MarginFamily family = MarginFamily::kNone;
  double m = 0.0;
  double s = 64.0;
  WordNormMode f_mode = WordNormMode::kNoMod;
  ContextNormMode g_mode = ContextNormMode::kNoMod;
  // ||W_y|| = 1 and ||h_i|| = s, as face-recognition margins do out of the box
  bool classic_normalize = false;
  bool use_bias = true;
  bool eval_with_margin = false;

  void validate() const {
    if (family == MarginFamily::kLsm) {
      if (!(m >= 1.0) || std::floor(m) != m) throw UsageError("LSM margin must be a positive integer");
    } else if (family == MarginFamily::kCos || family == MarginFamily::kArc) {
      if (!(m >= 0.0) || !std::isfinite(m)) throw UsageError("COS/ARC margin must be a non-negative real");
    }
    if (!(s > 0.0) || !std::isfinite(s)) throw UsageError("scale s must be positive");
  }

  // Compact human-readable tag, also used in output filenames.
  std::string label() const {
    std::ostringstream os;
    os << to_string(family);
    if (family != MarginFamily::kNone) os << "_m" << m;
    if (classic_normalize) {
      os << "_classic_s" << s;
    } else {
      os << "_f-" << to_string(f_mode) << "_g-" << to_string(g_mode);
    }
    if (!use_bias) os << "_nobias";
    if (eval_with_margin) os << "_evalmargin";
    return os.str();
  }

  friend bool operator==(const HeadConfig&, const HeadConfig&) = default;
};

inline void to_json(nlohmann::json& j, const HeadConfig& c) {
  j = nlohmann::json{{"margin", std::string(to_string(c.family))},
                     {"m", c.m},
                     {"s", c.s},
                     {"f_mode", std::string(to_string(c.f_mode))},
                     {"g_mode", std::string(to_string(c.g_mode))},
                     {"classic_normalize", c.classic_normalize},
                     {"use_bias", c.use_bias},
                     {"eval_with_margin", c.eval_with_margin}};
}

inline void from_json(const nlohmann::json& j, HeadConfig& c) {
  HeadConfig d;
  c.family = parse_margin_family(j.value("margin", std::string(to_string(d.family))));
  c.m = j.value("m", d.m);
  c.s = j.value("s", d.s);
  c.f_mode = parse_word_norm_mode(j.value("f_mode", std::string(to_string(d.f_mode))));
  c.g_mode = parse_context_norm_mode(j.value("g_mode", std::string(to_string(d.g_mode))));
  c.classic_normalize = j.value("classic_normalize", d.classic_normalize);
  c.use_bias = j.value("use_bias", d.use_bias);
  c.eval_with_margin = j.value("eval_with_margin", d.eval_with_margin);
}

// ---------------------------------------------------------------- scalar pieces

// Piece index of the L-Softmax angle function: floor(theta m / pi), capped at m-1.
inline int lsm_piece(double theta, int m) {
  int k = static_cast<int>(std::floor(theta * m / std::numbers::pi));
  return std::clamp(k, 0, m - 1);
}

// (-1)^k cos(m theta) - 2k, continuous and non-increasing on [0, pi].
inline double phi_lsm(double theta, double m) {
  if (!(theta >= 0.0 && theta <= std::numbers::pi)) throw DomainError("phi_lsm: theta outside [0, pi]");
  if (!(m >= 1.0) || std::floor(m) != m) throw DomainError("phi_lsm: m must be a positive integer");
  const int mi = static_cast<int>(m);
  const int k = lsm_piece(theta, mi);
  const double sign = (k % 2 == 0) ? 1.0 : -1.0;
  return sign * std::cos(mi * theta) - 2.0 * k;
}

inline double logit_cos(double cos_theta, double m, double scale) { return scale * (cos_theta - m); }

inline double logit_arc(double theta, double m, double scale) {
  const double c = std::cos(theta);
  const double s = std::sqrt(std::max(0.0, 1.0 - c * c));
  return scale * (c * std::cos(m) - s * std::sin(m));
}

// ---------------------------------------------------------------- cosine statistics

template <typename T>
struct CosineStats {
  Matrix<T> cos_theta;  // [batch x V], clamped
  Matrix<T> h_norms;    // [batch x 1]
  Matrix<T> w_norms;    // [V x 1]
};

template <typename T>
void require_nonzero_rows(const Matrix<T>& norms, std::string_view what) {
  for (Index i = 0; i < norms.rows(); ++i) {
    if (!(norms(i, 0) > T(0))) {
      throw DomainError(std::string(what) + " row " + std::to_string(i) + " has zero norm");
    }
  }
}

template <typename T>
CosineStats<T> cosine_stats(const Matrix<T>& H, const Matrix<T>& W) {
  if (H.cols() != W.cols()) {
    throw ShapeError("cosine_stats: context dim " + std::to_string(H.cols()) + " vs word dim " +
                     std::to_string(W.cols()));
  }
  CosineStats<T> out;
  out.h_norms = H.rowwise().norm();
  out.w_norms = W.rowwise().norm();
  require_nonzero_rows(out.h_norms, "context vector");
  require_nonzero_rows(out.w_norms, "word vector");
  Matrix<T> raw = H * W.transpose();
  const T lo = T(-1 + kCosineClamp), hi = T(1 - kCosineClamp);
  out.cos_theta = (raw.array().colwise() / out.h_norms.col(0).array()).rowwise() /
                  out.w_norms.col(0).transpose().array();
  out.cos_theta = out.cos_theta.cwiseMax(lo).cwiseMin(hi);
  return out;
}

// ---------------------------------------------------------------- norm scaling

// Replacement word-vector norms f(y) as a [1 x V] row. Word index y is the
// frequency rank, so rank 0 is argmax{c} and rank V-1 is argmin{c}.
// NO_MOD returns the current norms.
template <typename T>
Matrix<T> compute_f(std::span<const std::uint64_t> counts, const Matrix<T>& W, WordNormMode mode) {
  const Index V = W.rows();
  if (static_cast<Index>(counts.size()) != V) {
    throw ShapeError("compute_f: " + std::to_string(counts.size()) + " counts for " + std::to_string(V) +
                     " word vectors");
  }
  if (V == 0) throw ShapeError("compute_f: empty vocabulary");
  Matrix<T> f(1, V);
  const T n_max = W.row(0).norm();
  const T n_min = W.row(V - 1).norm();
  switch (mode) {
    case WordNormMode::kNoMod:
      f = W.rowwise().norm().transpose();
      break;
    case WordNormMode::kUniform:
      f.setConstant(n_max);
      break;
    case WordNormMode::kLogRank: {
      const T top = std::exp(n_max);
      const T v = (top - std::exp(n_min)) / static_cast<T>(V);
      for (Index y = 0; y < V; ++y) {
        const T arg = top - v * static_cast<T>(y);
        f(0, y) = arg > T(0) ? std::log(arg) : n_min;
      }
      break;
    }
    case WordNormMode::kUnigram: {
      const T c_max = static_cast<T>(counts[0]);
      if (!(c_max > T(0))) throw DomainError("compute_f: unigram mode needs a positive maximum count");
      const T u = (n_max - n_min) / c_max;
      for (Index y = 0; y < V; ++y) f(0, y) = n_min + u * static_cast<T>(counts[y]);
      break;
    }
    case WordNormMode::kLogUnigram:
      for (Index y = 0; y < V; ++y) {
        const T lc = counts[y] > 0 ? std::log(static_cast<T>(counts[y])) : -std::numeric_limits<T>::infinity();
        f(0, y) = std::max(lc, T(kLogUnigramFloor));
      }
      break;
  }
  return f;
}

// Replacement context-vector norms g(i) as a [batch x 1] column. MAX_NORM
// uses the largest norm over every context vector in the batch.
template <typename T>
Matrix<T> compute_g(const Matrix<T>& H, ContextNormMode mode) {
  if (H.rows() == 0) throw ShapeError("compute_g: empty batch");
  Matrix<T> norms = H.rowwise().norm();
  if (mode == ContextNormMode::kMaxNorm) norms.setConstant(norms.maxCoeff());
  return norms;
}

// Per-step constants f and g; absent means "use the live, differentiable norm".
template <typename T>
struct HeadScales {
  std::optional<Matrix<T>> f;  // [1 x V]
  std::optional<Matrix<T>> g;  // [batch x 1]
};

template <typename T>
HeadScales<T> head_scales(const Matrix<T>& H, const Matrix<T>& W, std::span<const std::uint64_t> counts,
                          const HeadConfig& config) {
  HeadScales<T> out;
  if (config.classic_normalize) return out;
  if (config.f_mode != WordNormMode::kNoMod) out.f = compute_f(counts, W, config.f_mode);
  if (config.g_mode != ContextNormMode::kNoMod) out.g = compute_g(H, config.g_mode);
  return out;
}

// ---------------------------------------------------------------- logits

// Margin-modified target cosine phi(theta_y) for a [batch x 1] column of
// clamped target cosines.
template <typename T>
Var<T> target_phi(const Var<T>& t, const HeadConfig& config) {
  const T m = static_cast<T>(config.m);
  switch (config.family) {
    case MarginFamily::kNone:
      return t;
    case MarginFamily::kCos:
      return add_scalar(t, -m);
    case MarginFamily::kArc: {
      // cos(theta + m) = cos(theta) cos(m) - sin(theta) sin(m), sin(theta) >= 0
      Var<T> sin_theta = sqrt(add_scalar(scale(mul(t, t), T(-1)), T(1)));
      return sub(scale(t, T(std::cos(config.m))), scale(sin_theta, T(std::sin(config.m))));
    }
    case MarginFamily::kLsm: {
      const int mi = static_cast<int>(config.m);
      if (mi == 1) return t;
      Var<T> theta = arccos(t);
      Matrix<T> sign(t.rows(), 1), offset(t.rows(), 1);
      for (Index i = 0; i < t.rows(); ++i) {
        const int k = lsm_piece(static_cast<double>(theta.value()(i, 0)), mi);
        sign(i, 0) = (k % 2 == 0) ? T(1) : T(-1);
        offset(i, 0) = T(-2 * k);
      }
      return add(mul(cos(scale(theta, T(mi))), constant<T>(std::move(sign))), constant<T>(std::move(offset)));
    }
  }
  return t;
}

// Margins that leave phi = cos(theta) exactly: LSM m=1, COS/ARC m=0.
inline bool margin_is_identity(const HeadConfig& c) {
  switch (c.family) {
    case MarginFamily::kNone: return true;
    case MarginFamily::kLsm: return c.m == 1.0;
    case MarginFamily::kCos:
    case MarginFamily::kArc: return c.m == 0.0;
  }
  return false;
}

namespace detail {
template <typename T>
Var<T> cosine_route_logits(const Var<T>& H, const Var<T>& W, const Var<T>& b, std::span<const std::uint32_t> targets,
                           const HeadConfig& config, bool margin_on, const HeadScales<T>& scales);
}

// Logits [batch x V] for context vectors H [batch x d], word vectors W
// [V x d] and bias b [1 x V]. The margin is applied to each row's target
// column only while training (or when eval_with_margin is set).
template <typename T>
Var<T> head_logits(const Var<T>& H, const Var<T>& W, const Var<T>& b, std::span<const std::uint32_t> targets,
                   const HeadConfig& config, bool training, const HeadScales<T>& scales) {
  config.validate();
  if (H.cols() != W.cols()) {
    throw ShapeError("head_logits: context " + shape_str(H.shape()) + " vs word vectors " + shape_str(W.shape()));
  }
  if (b.rows() != 1 || b.cols() != W.rows()) {
    throw ShapeError("head_logits: bias " + shape_str(b.shape()) + " for " + std::to_string(W.rows()) + " words");
  }
  if (static_cast<Index>(targets.size()) != H.rows()) throw ShapeError("head_logits: one target per context row");
  for (auto t : targets) {
    if (t >= static_cast<std::size_t>(W.rows())) throw UsageError("head_logits: target " + std::to_string(t) + " out of range");
  }

  const bool margin_on = (training || config.eval_with_margin) && !margin_is_identity(config);
  const bool raw = !config.classic_normalize && config.f_mode == WordNormMode::kNoMod &&
                   config.g_mode == ContextNormMode::kNoMod && !scales.f && !scales.g;
  if (raw && !margin_on) {
    // ||h|| ||W|| cos(theta) is the plain inner product
    Var<T> logits = matmul_nt(H, W);
    return config.use_bias ? add(logits, b) : logits;
  }
  return detail::cosine_route_logits(H, W, b, targets, config, margin_on, scales);
}

namespace detail {

template <typename T>
Var<T> cosine_route_logits(const Var<T>& H, const Var<T>& W, const Var<T>& b, std::span<const std::uint32_t> targets,
                           const HeadConfig& config, bool margin_on, const HeadScales<T>& scales) {
  Var<T> cos_theta = cosine_similarity(H, W, T(kCosineClamp));

  Var<T> phi = cos_theta;
  if (margin_on) phi = scatter_cols(cos_theta, targets, target_phi(gather_cols(cos_theta, targets), config));

  Var<T> g, f;
  if (config.classic_normalize) {
    // ||h_i|| = s, ||W_y|| = 1
    g = constant<T>(Matrix<T>::Constant(H.rows(), 1, T(config.s)));
    f = constant<T>(Matrix<T>::Ones(1, W.rows()));
  } else {
    if (scales.g && (scales.g->rows() != H.rows() || scales.g->cols() != 1)) throw ShapeError("head_logits: g has wrong shape");
    if (scales.f && (scales.f->cols() != W.rows() || scales.f->rows() != 1)) throw ShapeError("head_logits: f has wrong shape");
    g = scales.g ? constant<T>(*scales.g) : norm_l2(H, 1);
    f = scales.f ? constant<T>(*scales.f) : transpose(norm_l2(W, 1));
  }
  return scale_rows_cols(phi, g, f, config.use_bias ? &b : nullptr);
}

}  // namespace detail

template <typename T>
Var<T> head_logits(const Var<T>& H, const Var<T>& W, const Var<T>& b, std::span<const std::uint32_t> targets,
                   std::span<const std::uint64_t> counts, const HeadConfig& config, bool training) {
  return head_logits(H, W, b, targets, config, training, head_scales(H.value(), W.value(), counts, config));
}

}  // namespace marginlm
