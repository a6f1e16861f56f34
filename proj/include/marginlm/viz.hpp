#pragma once

// Embedding-geometry analysis over a frozen output matrix W (one row per
// word): PCA + exact t-SNE projection, polar alignment on a reference word,
// pairwise angle reports, dispersion and the norm / log-count correlation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>

#include "marginlm/corpus.hpp"
#include "marginlm/error.hpp"
#include "marginlm/numerics.hpp"
#include "marginlm/rng.hpp"

namespace marginlm::viz {

using Mat = Matrix<double>;

inline bool is_special(const Vocabulary& vocab, WordId id) {
  return id == vocab.unk_id() || id == vocab.boundary_id();
}

// The k most frequent ordinary words, most frequent first.
inline std::vector<WordId> frequent_words(const Vocabulary& vocab, std::size_t k) {
  std::vector<WordId> out;
  for (WordId id = 0; id < vocab.size() && out.size() < k; ++id) {
    if (!is_special(vocab, id)) out.push_back(id);
  }
  if (out.size() < k) {
    throw UsageError("only " + std::to_string(out.size()) + " ordinary words in the vocabulary, " +
                     std::to_string(k) + " requested");
  }
  return out;
}

inline void require_rows(const Mat& W, const Vocabulary& vocab) {
  if (static_cast<std::size_t>(W.rows()) != vocab.size()) {
    throw ShapeError("W has " + std::to_string(W.rows()) + " rows, vocabulary has " + std::to_string(vocab.size()));
  }
}

inline WordId lookup(const Vocabulary& vocab, std::string_view word) {
  auto id = vocab.find(word);
  if (!id) throw DataError("word '" + std::string(word) + "' is not in the vocabulary");
  return *id;
}

// ---------------------------------------------------------------- PCA

struct Pca {
  Eigen::RowVectorXd mean;
  Eigen::MatrixXd components;  // [d x k], columns by decreasing variance
  Eigen::VectorXd variances;
  Mat scores;                  // [n x k]

  Mat reconstruct() const {
    Mat out = scores * components.transpose();
    out.rowwise() += mean;
    return out;
  }
};

// Eigenvectors get a fixed sign: the largest-magnitude entry is positive.
inline Pca pca(const Mat& X, std::size_t k) {
  if (X.rows() < 1 || X.cols() < 1) throw ShapeError("pca: empty input");
  k = std::min<std::size_t>(k, static_cast<std::size_t>(X.cols()));
  Pca out;
  out.mean = X.colwise().mean();
  Eigen::MatrixXd centered = X.rowwise() - out.mean;
  const double denom = X.rows() > 1 ? static_cast<double>(X.rows() - 1) : 1.0;
  Eigen::MatrixXd cov = centered.transpose() * centered / denom;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw DomainError("pca: eigendecomposition failed");
  const auto d = cov.rows();
  const auto kk = static_cast<Index>(k);
  out.components.resize(d, kk);
  out.variances.resize(kk);
  for (Index j = 0; j < kk; ++j) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - j);
    Index arg = 0;
    for (Index r = 1; r < d; ++r) {
      if (std::abs(v(r)) > std::abs(v(arg))) arg = r;
    }
    if (v(arg) < 0) v = -v;
    out.components.col(j) = v;
    out.variances(j) = std::max(0.0, eig.eigenvalues()(d - 1 - j));
  }
  out.scores = centered * out.components;
  return out;
}

// ---------------------------------------------------------------- t-SNE

struct TsneOptions {
  double perplexity = 30.0;
  std::size_t iterations = 1000;
  double learning_rate = 200.0;
  double exaggeration = 12.0;
  std::size_t exaggeration_iters = 250;
  double jitter = 1.0;  // relative to the initial spread; 0 keeps the PCA start exactly
};

namespace detail {

// Conditional P_{j|i} rows matching the target perplexity by bisection on
// the precision.
inline Mat conditional_p(const Mat& D, double perplexity) {
  const Index n = D.rows();
  Mat P = Mat::Zero(n, n);
  const double target = std::log(perplexity);
  for (Index i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 200; ++it) {
      double dmin = std::numeric_limits<double>::infinity();
      for (Index j = 0; j < n; ++j) {
        if (j != i) dmin = std::min(dmin, D(i, j));
      }
      double sum = 0.0, weighted = 0.0;
      for (Index j = 0; j < n; ++j) {
        if (j == i) continue;
        const double p = std::exp(-(D(i, j) - dmin) * beta);
        P(i, j) = p;
        sum += p;
        weighted += (D(i, j) - dmin) * p;
      }
      const double entropy = std::log(sum) + beta * weighted / sum;
      for (Index j = 0; j < n; ++j) P(i, j) /= sum;
      const double diff = entropy - target;
      if (std::abs(diff) < 1e-10) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
  }
  return P;
}

inline Mat squared_distances(const Mat& X) {
  const Index n = X.rows();
  Mat D(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) D(i, j) = (X.row(i) - X.row(j)).squaredNorm();
  }
  return D;
}

}  // namespace detail

// Exact t-SNE from a given start. init rows are copied, then jittered.
inline Mat tsne(const Mat& X, const Mat& init, const TsneOptions& opts, std::uint64_t seed) {
  const Index n = X.rows();
  if (init.rows() != n || init.cols() != 2) throw ShapeError("tsne: init must be [n x 2]");
  if (n < 2) return init;
  // perplexity cannot exceed the neighborhood size
  const double perp = std::min(opts.perplexity, std::max(1.0, static_cast<double>(n - 1) / 3.0));
  Mat P = detail::conditional_p(detail::squared_distances(X), perp);
  P = (P + Mat(P.transpose())) / (2.0 * static_cast<double>(n));
  P = P.cwiseMax(1e-12);

  Mat Y = init;
  double spread = 0.0;
  {
    const Eigen::RowVectorXd mu = Y.colwise().mean();
    spread = std::sqrt((Y.rowwise() - mu).col(0).squaredNorm() / static_cast<double>(n));
  }
  const double scale = spread > 0.0 ? 1e-4 / spread : 1.0;
  Y *= scale;
  if (opts.jitter > 0.0) {
    Rng rng(seed);
    for (Index i = 0; i < Y.size(); ++i) Y.data()[i] += opts.jitter * 1e-4 * rng.normal();
  }

  Mat velocity = Mat::Zero(n, 2);
  Mat gains = Mat::Ones(n, 2);
  Mat num(n, n);
  Mat grad(n, 2);
  for (std::size_t iter = 0; iter < opts.iterations; ++iter) {
    const double exag = iter < opts.exaggeration_iters ? opts.exaggeration : 1.0;
    const double momentum = iter < opts.exaggeration_iters ? 0.5 : 0.8;
    double total = 0.0;
    for (Index i = 0; i < n; ++i) {
      num(i, i) = 0.0;
      for (Index j = i + 1; j < n; ++j) {
        const double v = 1.0 / (1.0 + (Y.row(i) - Y.row(j)).squaredNorm());
        num(i, j) = v;
        num(j, i) = v;
        total += 2.0 * v;
      }
    }
    for (Index i = 0; i < n; ++i) {
      double gx = 0.0, gy = 0.0;
      for (Index j = 0; j < n; ++j) {
        if (j == i) continue;
        const double w = (exag * P(i, j) - num(i, j) / total) * num(i, j);
        gx += w * (Y(i, 0) - Y(j, 0));
        gy += w * (Y(i, 1) - Y(j, 1));
      }
      grad(i, 0) = 4.0 * gx;
      grad(i, 1) = 4.0 * gy;
    }
    for (Index k = 0; k < grad.size(); ++k) {
      double& g = gains.data()[k];
      const bool same_sign = (grad.data()[k] > 0) == (velocity.data()[k] > 0);
      g = same_sign ? g * 0.8 : g + 0.2;
      g = std::max(g, 0.01);
      velocity.data()[k] = momentum * velocity.data()[k] - opts.learning_rate * g * grad.data()[k];
      Y.data()[k] += velocity.data()[k];
    }
    const Eigen::RowVectorXd mu = Y.colwise().mean();
    Y.rowwise() -= mu;
  }
  return Y;
}

// ---------------------------------------------------------------- projection

inline double wrap_angle(double a) {
  constexpr double pi = std::numbers::pi;
  a = std::remainder(a, 2.0 * pi);
  if (a <= -pi) a += 2.0 * pi;
  return a;
}

struct Projection {
  std::vector<WordId> ids;
  Mat pca;                // PCA stage, [n x pca_dims]
  Mat xy;                 // [n x 2]
  std::vector<double> radius;
  std::vector<double> angle;  // (-pi, pi]
  std::optional<WordId> reference;
  std::uint64_t seed = 0;

  std::size_t size() const { return ids.size(); }

  std::optional<std::size_t> index_of(WordId id) const {
    auto it = std::find(ids.begin(), ids.end(), id);
    if (it == ids.end()) return std::nullopt;
    return static_cast<std::size_t>(it - ids.begin());
  }
};

inline void fill_polar(Projection& p) {
  const auto n = static_cast<std::size_t>(p.xy.rows());
  p.radius.resize(n);
  p.angle.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = p.xy(static_cast<Index>(i), 0);
    const double y = p.xy(static_cast<Index>(i), 1);
    p.radius[i] = std::hypot(x, y);
    p.angle[i] = wrap_angle(std::atan2(y, x));
  }
}

struct ProjectOptions {
  std::size_t top_k = 100;
  std::size_t pca_dims = 50;
  TsneOptions tsne;
  std::uint64_t seed = 1;
};

// Projects an explicit word list; top_k in opts is ignored.
inline Projection project_words(const Mat& W, std::vector<WordId> ids, const ProjectOptions& opts) {
  if (ids.size() < 3) throw UsageError("project: at least 3 words are needed");
  for (WordId id : ids) {
    if (id >= W.rows()) throw UsageError("project: word id " + std::to_string(id) + " out of range");
  }
  Projection p;
  p.ids = std::move(ids);
  p.seed = opts.seed;
  Mat X(static_cast<Index>(p.ids.size()), W.cols());
  for (std::size_t i = 0; i < p.ids.size(); ++i) X.row(static_cast<Index>(i)) = W.row(p.ids[i]);
  const Pca reduced = pca(X, std::min<std::size_t>(opts.pca_dims, static_cast<std::size_t>(W.cols())));
  p.pca = reduced.scores;
  Mat init = Mat::Zero(X.rows(), 2);
  init.leftCols(std::min<Index>(2, p.pca.cols())) = p.pca.leftCols(std::min<Index>(2, p.pca.cols()));
  p.xy = tsne(p.pca, init, opts.tsne, opts.seed);
  fill_polar(p);
  return p;
}

// The top_k most frequent ordinary words.
inline Projection project(const Mat& W, const Vocabulary& vocab, const ProjectOptions& opts) {
  require_rows(W, vocab);
  if (opts.top_k < 3) throw UsageError("project: top_k must be at least 3");
  return project_words(W, frequent_words(vocab, opts.top_k), opts);
}

// Rotates and scales so the reference lands exactly on (1, 0).
inline Projection align(const Projection& in, WordId reference) {
  auto idx = in.index_of(reference);
  if (!idx) throw UsageError("align: reference word id " + std::to_string(reference) + " is not in the projection");
  const double r_ref = in.radius[*idx];
  if (!(r_ref >= 1e-12)) throw DomainError("align: reference word sits at the origin");
  const double a_ref = in.angle[*idx];
  Projection out = in;
  out.reference = reference;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (i == *idx) {
      out.radius[i] = 1.0;
      out.angle[i] = 0.0;
    } else {
      out.radius[i] = in.radius[i] / r_ref;
      out.angle[i] = wrap_angle(in.angle[i] - a_ref);
    }
    out.xy(static_cast<Index>(i), 0) = out.radius[i] * std::cos(out.angle[i]);
    out.xy(static_cast<Index>(i), 1) = out.radius[i] * std::sin(out.angle[i]);
  }
  return out;
}

// ---------------------------------------------------------------- angles

inline double vector_angle(const Mat& W, Index a, Index b) {
  const double na = W.row(a).norm();
  const double nb = W.row(b).norm();
  if (na == 0.0 || nb == 0.0) throw DomainError("angle undefined for a zero vector");
  const double c = W.row(a).dot(W.row(b)) / (na * nb);
  return std::acos(std::clamp(c, -1.0, 1.0));
}

struct PairAngle {
  std::string first;
  std::string second;
  double angle = 0.0;
};

inline std::vector<PairAngle> angle_report(const Mat& W, const Vocabulary& vocab,
                                           std::span<const std::pair<std::string, std::string>> pairs) {
  require_rows(W, vocab);
  std::vector<PairAngle> out;
  for (const auto& [a, b] : pairs) {
    const WordId ia = lookup(vocab, a);
    const WordId ib = lookup(vocab, b);
    out.push_back({a, b, vector_angle(W, ia, ib)});
  }
  return out;
}

// Two whitespace-separated words per line; blank lines and '#' lines skipped.
inline std::vector<std::pair<std::string, std::string>> parse_word_pairs(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string line(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    std::istringstream is(line);
    std::string a, b, extra;
    if (!(is >> a)) continue;
    if (a[0] == '#') continue;
    if (!(is >> b) || (is >> extra)) {
      throw DataError("word pairs line " + std::to_string(line_no) + ": expected exactly two words");
    }
    out.emplace_back(a, b);
  }
  return out;
}

// Mean pairwise angle among the top_k most frequent words.
inline double dispersion(const Mat& W, const Vocabulary& vocab, std::size_t top_k) {
  require_rows(W, vocab);
  if (top_k < 2) throw UsageError("dispersion: top_k must be at least 2");
  const auto ids = frequent_words(vocab, top_k);
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = i + 1; j < ids.size(); ++j) {
      total += vector_angle(W, ids[i], ids[j]);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

// ---------------------------------------------------------------- norms

struct NormRow {
  WordId id = 0;
  std::uint64_t count = 0;
  double norm = 0.0;
};

struct NormReport {
  std::vector<NormRow> rows;
  double correlation = 0.0;
  bool degenerate = false;  // zero variance on either side
};

inline std::pair<double, bool> pearson(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  if (n < 2 || y.size() != n) return {0.0, true};
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  // relative cutoff so rounding noise around a constant counts as constant
  const double tiny = 1e-24 * static_cast<double>(n);
  if (sxx <= tiny * (1.0 + mx * mx) || syy <= tiny * (1.0 + my * my)) return {0.0, true};
  return {sxy / std::sqrt(sxx * syy), false};
}

// Words with count 0 have no log count and are left out.
inline NormReport norm_report(const Mat& W, const Vocabulary& vocab) {
  require_rows(W, vocab);
  NormReport r;
  std::vector<double> norms, logs;
  for (WordId id = 0; id < vocab.size(); ++id) {
    const double n = W.row(id).norm();
    r.rows.push_back({id, vocab.count(id), n});
    if (vocab.count(id) == 0) continue;
    norms.push_back(n);
    logs.push_back(std::log(static_cast<double>(vocab.count(id))));
  }
  std::tie(r.correlation, r.degenerate) = pearson(norms, logs);
  return r;
}

// ---------------------------------------------------------------- output

inline std::string fmt_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_projection_tsv(std::ostream& os, const Projection& p, const Vocabulary& vocab) {
  os << "word\tx\ty\tradius\tangle\n";
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto r = static_cast<Index>(i);
    os << vocab.word(p.ids[i]) << '\t' << fmt_real(p.xy(r, 0)) << '\t' << fmt_real(p.xy(r, 1)) << '\t'
       << fmt_real(p.radius[i]) << '\t' << fmt_real(p.angle[i]) << '\n';
  }
}

inline void write_angle_tsv(std::ostream& os, std::span<const PairAngle> angles) {
  os << "word1\tword2\tangle_radians\n";
  for (const auto& a : angles) os << a.first << '\t' << a.second << '\t' << fmt_real(a.angle) << '\n';
}

inline void write_norm_tsv(std::ostream& os, const NormReport& r, const Vocabulary& vocab) {
  os << "rank\tword\tcount\tnorm\n";
  for (const auto& row : r.rows) {
    os << row.id << '\t' << vocab.word(row.id) << '\t' << row.count << '\t' << fmt_real(row.norm) << '\n';
  }
}

inline std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct SvgOptions {
  std::string title;
  std::unordered_set<WordId> highlight;  // drawn in blue
  std::unordered_set<WordId> labeled;    // text labels next to the point
};

// Polar scatter on a fixed 800x800 canvas, outermost ring at the largest radius.
inline void write_polar_svg(std::ostream& os, const Projection& p, const Vocabulary& vocab, const SvgOptions& opts) {
  constexpr double size = 800.0, center = 400.0, rmax_px = 360.0;
  double rmax = 0.0;
  for (double r : p.radius) rmax = std::max(rmax, r);
  if (rmax <= 0.0) rmax = 1.0;
  char buf[256];
  auto emit = [&](const char* fmt, auto... args) {
    std::snprintf(buf, sizeof buf, fmt, args...);
    os << buf;
  };
  emit("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n", size,
       size, size, size);
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int ring = 1; ring <= 4; ++ring) {
    emit("<circle cx=\"400\" cy=\"400\" r=\"%.3f\" fill=\"none\" stroke=\"#dddddd\"/>\n", rmax_px * ring / 4.0);
  }
  for (int spoke = 0; spoke < 12; ++spoke) {
    const double a = spoke * std::numbers::pi / 6.0;
    emit("<line x1=\"400\" y1=\"400\" x2=\"%.3f\" y2=\"%.3f\" stroke=\"#dddddd\"/>\n", center + rmax_px * std::cos(a),
         center - rmax_px * std::sin(a));
  }
  if (!opts.title.empty()) os << "<text x=\"10\" y=\"20\" font-size=\"14\">" << xml_escape(opts.title) << "</text>\n";
  for (std::size_t i = 0; i < p.size(); ++i) {
    const WordId id = p.ids[i];
    const double px = center + rmax_px * p.radius[i] / rmax * std::cos(p.angle[i]);
    const double py = center - rmax_px * p.radius[i] / rmax * std::sin(p.angle[i]);
    const char* color = p.reference == id ? "#d62728" : opts.highlight.count(id) ? "#1f77b4" : "#999999";
    emit("<circle cx=\"%.3f\" cy=\"%.3f\" r=\"3\" fill=\"%s\"/>\n", px, py, color);
    if (opts.labeled.count(id) || p.reference == id) {
      emit("<text x=\"%.3f\" y=\"%.3f\" font-size=\"10\">", px + 4.0, py - 4.0);
      os << xml_escape(vocab.word(id)) << "</text>\n";
    }
  }
  os << "</svg>\n";
}

}  // namespace marginlm::viz
