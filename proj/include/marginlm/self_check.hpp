#pragma once

// Finite-difference audit of the full head + cross-entropy loss over every
// head configuration, on small random instances in 64-bit arithmetic.

#include <cstdint>
#include <cstdio>
#include <ostream>
#include <span>
#include <vector>

#include "marginlm/margin_head.hpp"
#include "marginlm/numerics.hpp"
#include "marginlm/rng.hpp"

namespace marginlm {

struct GradAuditOptions {
  std::uint64_t seed = 7;
  std::size_t batch = 6;
  std::size_t vocab = 7;
  std::size_t dim = 5;
  double epsilon = 1e-5;
};

struct GradAuditRow {
  HeadConfig config;
  double max_error = 0.0;
};

// Representative margin per family; LSM uses m = 3 so several pieces occur.
inline double audit_margin(MarginFamily f) {
  switch (f) {
    case MarginFamily::kNone: return 0.0;
    case MarginFamily::kCos: return 0.2;
    case MarginFamily::kArc: return 0.3;
    case MarginFamily::kLsm: return 3.0;
  }
  return 0.0;
}

// families x f-modes x g-modes x {non-classic, classic}
inline std::vector<HeadConfig> audit_configs() {
  std::vector<HeadConfig> out;
  for (auto fam : kAllMarginFamilies) {
    for (auto f : kAllWordNormModes) {
      for (auto g : kAllContextNormModes) {
        for (bool classic : {false, true}) {
          HeadConfig c;
          c.family = fam;
          c.m = audit_margin(fam);
          c.f_mode = f;
          c.g_mode = g;
          c.classic_normalize = classic;
          c.s = 4.0;
          out.push_back(c);
        }
      }
    }
  }
  return out;
}

// Loss gradient w.r.t. H, W and b. f and g come from the unperturbed
// inputs and are held fixed, matching how they enter training.
inline double audit_one(const HeadConfig& config, const GradAuditOptions& opts, Rng& rng) {
  const auto N = static_cast<Index>(opts.batch);
  const auto V = static_cast<Index>(opts.vocab);
  const auto d = static_cast<Index>(opts.dim);
  auto gaussian = [&](Index r, Index c, double sd) {
    Matrix<double> m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
    return m;
  };
  const Matrix<double> H = gaussian(N, d, 0.7);
  const Matrix<double> W = gaussian(V, d, 0.5);
  const Matrix<double> b = gaussian(1, V, 0.1);
  std::vector<std::uint32_t> targets(opts.batch);
  for (auto& t : targets) t = static_cast<std::uint32_t>(rng.below(opts.vocab));
  std::vector<std::uint64_t> counts(opts.vocab);
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] = 100 / (i + 1) + 1;
  const auto scales = head_scales<double>(H, W, counts, config);
  auto fn = [&](std::span<const Var<double>> in) {
    Var<double> logits = head_logits(in[0], in[1], in[2], std::span<const std::uint32_t>(targets), config,
                                     /*training=*/true, scales);
    return softmax_cross_entropy(logits, std::span<const std::uint32_t>(targets), Reduction::kMean);
  };
  return grad_check<double>(fn, {H, W, b}, opts.epsilon);
}

inline std::vector<GradAuditRow> grad_audit(const GradAuditOptions& opts = {}) {
  Rng rng(opts.seed);
  std::vector<GradAuditRow> rows;
  for (const auto& c : audit_configs()) rows.push_back({c, audit_one(c, opts, rng)});
  return rows;
}

inline void write_grad_audit_tsv(std::ostream& os, std::span<const GradAuditRow> rows) {
  os << "margin\tm\tf_mode\tg_mode\tclassic_normalize\tmax_rel_error\n";
  char buf[32];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6e", r.max_error);
    os << to_string(r.config.family) << '\t' << r.config.m << '\t' << to_string(r.config.f_mode) << '\t'
       << to_string(r.config.g_mode) << '\t' << (r.config.classic_normalize ? 1 : 0) << '\t' << buf << '\n';
  }
}

}  // namespace marginlm
