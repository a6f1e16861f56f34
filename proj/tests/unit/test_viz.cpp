#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "marginlm/viz.hpp"

using namespace marginlm;
using namespace marginlm::viz;
using std::numbers::pi;

namespace {

// n ordinary words w0..w{n-1} with strictly decreasing counts, then the specials.
Vocabulary make_vocab(std::size_t n) {
  std::vector<std::string> words;
  std::vector<std::uint64_t> counts;
  for (std::size_t i = 0; i < n; ++i) {
    words.push_back("w" + std::to_string(i));
    counts.push_back(10 * (n - i) + 5);
  }
  words.emplace_back("<sb>");
  counts.push_back(3);
  words.emplace_back("<unk>");
  counts.push_back(0);
  return Vocabulary(std::move(words), std::move(counts));
}

Mat gaussian(Index r, Index c, Rng& rng) {
  Mat m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

ProjectOptions quick(std::size_t top_k = 30, std::uint64_t seed = 1) {
  ProjectOptions o;
  o.top_k = top_k;
  o.pca_dims = 10;
  o.tsne.iterations = 300;
  o.tsne.exaggeration_iters = 100;
  o.seed = seed;
  return o;
}

double angle_diff(double a, double b) { return wrap_angle(a - b); }

}  // namespace

TEST(Pca, RankTwoSubspaceIsExact) {
  Rng rng(1);
  const Mat A = gaussian(40, 2, rng), B = gaussian(2, 12, rng);
  Mat X = A * B;
  X.rowwise() += gaussian(1, 12, rng).row(0);
  const Pca p = pca(X, 2);
  EXPECT_LT((p.reconstruct() - X).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_GE(p.variances(0), p.variances(1));
  for (Index j = 0; j < 2; ++j) {
    Index arg = 0;
    p.components.col(j).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(p.components(arg, j), 0.0);
    EXPECT_NEAR(p.components.col(j).norm(), 1.0, 1e-12);
  }
  EXPECT_NEAR(p.components.col(0).dot(p.components.col(1)), 0.0, 1e-12);
}

TEST(Pca, ClampsDimsToInput) {
  Rng rng(2);
  const Pca p = pca(gaussian(10, 4, rng), 50);
  EXPECT_EQ(p.scores.cols(), 4);
}

TEST(Project, IdenticalRowsCoincide) {
  const auto vocab = make_vocab(25);
  Rng rng(3);
  Mat W = gaussian(static_cast<Index>(vocab.size()), 8, rng);
  for (Index i = 1; i < 4; ++i) W.row(i) = W.row(0);
  auto opts = quick(25);
  opts.tsne.jitter = 0.0;
  const auto p = project(W, vocab, opts);
  for (Index i = 1; i < 4; ++i) EXPECT_LT((p.xy.row(i) - p.xy.row(0)).norm(), 1e-6);
  EXPECT_GT((p.xy.row(10) - p.xy.row(0)).norm(), 1e-6);
}

TEST(Project, SameSeedSameCoordinates) {
  const auto vocab = make_vocab(40);
  Rng rng(4);
  const Mat W = gaussian(static_cast<Index>(vocab.size()), 16, rng);
  const auto a = project(W, vocab, quick(30, 5));
  const auto b = project(W, vocab, quick(30, 5));
  EXPECT_EQ(a.xy, b.xy);
  EXPECT_EQ(a.ids, b.ids);
  EXPECT_EQ(a.size(), 30u);
  for (WordId id : a.ids) EXPECT_FALSE(is_special(vocab, id));
  for (double ang : a.angle) {
    EXPECT_GT(ang, -pi);
    EXPECT_LE(ang, pi);
  }
  EXPECT_NE(project(W, vocab, quick(30, 6)).xy, a.xy);
}

TEST(Project, TopKBounds) {
  const auto vocab = make_vocab(10);
  Rng rng(5);
  const Mat W = gaussian(static_cast<Index>(vocab.size()), 4, rng);
  EXPECT_THROW(project(W, vocab, quick(2)), UsageError);
  EXPECT_THROW(project(W, vocab, quick(11)), UsageError);
  EXPECT_THROW(project(Mat(W.topRows(5)), vocab, quick(5)), ShapeError);
}

TEST(Align, ReferenceLandsOnUnitAxis) {
  const auto vocab = make_vocab(30);
  Rng rng(6);
  const Mat W = gaussian(static_cast<Index>(vocab.size()), 10, rng);
  const auto p = project(W, vocab, quick(30));
  const WordId ref = 3;
  const auto a = align(p, ref);
  const auto k = *a.index_of(ref);
  EXPECT_EQ(a.radius[k], 1.0);
  EXPECT_EQ(a.angle[k], 0.0);
  EXPECT_EQ(a.xy(static_cast<Index>(k), 0), 1.0);
  EXPECT_EQ(a.xy(static_cast<Index>(k), 1), 0.0);
  EXPECT_EQ(a.reference, std::optional<WordId>(ref));
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t j = 0; j < p.size(); ++j) {
      EXPECT_NEAR(angle_diff(angle_diff(a.angle[i], a.angle[j]), angle_diff(p.angle[i], p.angle[j])), 0.0, 1e-12);
    }
    EXPECT_NEAR(a.radius[i], p.radius[i] / p.radius[k], 1e-12);
  }
  const auto twice = align(a, ref);
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_NEAR(twice.radius[i], a.radius[i], 1e-12);
    EXPECT_NEAR(angle_diff(twice.angle[i], a.angle[i]), 0.0, 1e-12);
  }
}

TEST(Align, Errors) {
  Projection p;
  p.ids = {0, 1, 2};
  p.xy = Mat::Zero(3, 2);
  p.xy(1, 0) = 1.0;
  p.xy(2, 1) = 2.0;
  fill_polar(p);
  EXPECT_THROW(align(p, 0), DomainError);
  EXPECT_THROW(align(p, 7), UsageError);
  const auto a = align(p, 2);
  EXPECT_NEAR(a.radius[1], 0.5, 1e-15);
  EXPECT_NEAR(a.angle[1], -pi / 2, 1e-15);
}

TEST(WrapAngle, HalfOpenRange) {
  EXPECT_DOUBLE_EQ(wrap_angle(pi), pi);
  EXPECT_DOUBLE_EQ(wrap_angle(-pi), pi);
  EXPECT_NEAR(wrap_angle(3 * pi / 2), -pi / 2, 1e-15);
  EXPECT_NEAR(wrap_angle(-5 * pi / 2), -pi / 2, 1e-14);
}

TEST(AngleReport, Examples) {
  const auto vocab = make_vocab(5);
  Rng rng(7);
  Mat W = gaussian(static_cast<Index>(vocab.size()), 6, rng);
  W.row(1) = -W.row(0);
  const std::vector<std::pair<std::string, std::string>> pairs{{"w0", "w0"}, {"w0", "w1"}, {"w2", "w3"}};
  const auto r = angle_report(W, vocab, pairs);
  EXPECT_NEAR(r[0].angle, 0.0, 1e-7);
  EXPECT_NEAR(r[1].angle, pi, 1e-7);
  double dot = 0, n2 = 0, n3 = 0;
  for (Index k = 0; k < 6; ++k) {
    dot += W(2, k) * W(3, k);
    n2 += W(2, k) * W(2, k);
    n3 += W(3, k) * W(3, k);
  }
  EXPECT_NEAR(r[2].angle, std::acos(dot / std::sqrt(n2 * n3)), 1e-9);
  EXPECT_EQ(r[2].first, "w2");
}

TEST(AngleReport, OovNamesWord) {
  const auto vocab = make_vocab(5);
  const Mat W = Mat::Ones(static_cast<Index>(vocab.size()), 3);
  const std::vector<std::pair<std::string, std::string>> pairs{{"w0", "zebra"}};
  try {
    angle_report(W, vocab, pairs);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("zebra"), std::string::npos);
  }
}

TEST(WordPairs, Parsing) {
  const auto p = parse_word_pairs("# groups\nhe she\n\n  him   her  \nfather\tmother");
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p[1], (std::pair<std::string, std::string>{"him", "her"}));
  EXPECT_EQ(p[2].second, "mother");
  EXPECT_THROW(parse_word_pairs("a b c\n"), DataError);
  EXPECT_THROW(parse_word_pairs("lonely\n"), DataError);
}

TEST(Dispersion, Examples) {
  const auto vocab = make_vocab(4);
  Mat same = Mat::Ones(static_cast<Index>(vocab.size()), 3);
  EXPECT_NEAR(dispersion(same, vocab, 4), 0.0, 1e-7);
  Mat ortho = Mat::Zero(static_cast<Index>(vocab.size()), 2);
  ortho(0, 0) = 1;
  ortho(1, 1) = 1;
  EXPECT_NEAR(dispersion(ortho.leftCols(2), vocab, 2), pi / 2, 1e-15);
  EXPECT_THROW(dispersion(same, vocab, 1), UsageError);
}

TEST(Dispersion, GaussianHighDimNearRightAngle) {
  const auto vocab = make_vocab(100);
  Rng rng(8);
  const Mat W = gaussian(static_cast<Index>(vocab.size()), 500, rng);
  EXPECT_NEAR(dispersion(W, vocab, 100), pi / 2, 0.1);
}

TEST(Geometry, OrthogonalInvariance) {
  const auto vocab = make_vocab(20);
  Rng rng(9);
  const Mat W = gaussian(static_cast<Index>(vocab.size()), 7, rng);
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(Eigen::MatrixXd(gaussian(7, 7, rng)));
  const Eigen::MatrixXd Q = qr.householderQ();
  const Mat WQ = W * Q;
  EXPECT_NEAR(dispersion(W, vocab, 20), dispersion(WQ, vocab, 20), 1e-9);
  const std::vector<std::pair<std::string, std::string>> pairs{{"w0", "w5"}, {"w3", "w19"}, {"w7", "<sb>"}};
  const auto a = angle_report(W, vocab, pairs), b = angle_report(WQ, vocab, pairs);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i].angle, b[i].angle, 1e-9);
}

TEST(NormReport, PerfectLogRelation) {
  const auto vocab = make_vocab(30);
  Rng rng(10);
  Mat W = gaussian(static_cast<Index>(vocab.size()), 5, rng);
  for (WordId id = 0; id < vocab.size(); ++id) {
    const double target = vocab.count(id) > 0 ? std::log(static_cast<double>(vocab.count(id))) : 1.0;
    W.row(id) *= target / W.row(id).norm();
  }
  const auto r = norm_report(W, vocab);
  EXPECT_NEAR(r.correlation, 1.0, 1e-12);
  EXPECT_FALSE(r.degenerate);
  EXPECT_EQ(r.rows.size(), vocab.size());
}

TEST(NormReport, ConstantNormsAreDegenerate) {
  const auto vocab = make_vocab(10);
  const Mat W = Mat::Ones(static_cast<Index>(vocab.size()), 4);
  const auto r = norm_report(W, vocab);
  EXPECT_EQ(r.correlation, 0.0);
  EXPECT_TRUE(r.degenerate);
}

TEST(NormReport, RandomNormsAreUncorrelated) {
  const auto vocab = make_vocab(1000);
  Rng rng(11);
  Mat W = gaussian(static_cast<Index>(vocab.size()), 4, rng);
  for (Index i = 0; i < W.rows(); ++i) W.row(i) *= rng.uniform(0.5, 3.0) / W.row(i).norm();
  EXPECT_LT(std::abs(norm_report(W, vocab).correlation), 0.2);
}

TEST(Output, TsvAndSvgAreDeterministic) {
  const auto vocab = make_vocab(20);
  Rng rng(12);
  const Mat W = gaussian(static_cast<Index>(vocab.size()), 6, rng);
  auto render = [&] {
    const auto p = align(project(W, vocab, quick(20, 3)), 0);
    std::ostringstream tsv, svg;
    write_projection_tsv(tsv, p, vocab);
    SvgOptions o;
    o.title = "a <b> & c";
    o.highlight = {1, 2};
    o.labeled = {0, 1};
    write_polar_svg(svg, p, vocab, o);
    return std::pair<std::string, std::string>(tsv.str(), svg.str());
  };
  const auto a = render(), b = render();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(a.first.substr(0, a.first.find('\n')), "word\tx\ty\tradius\tangle");
  EXPECT_EQ(std::count(a.first.begin(), a.first.end(), '\n'), 21);
  EXPECT_NE(a.second.find("width=\"800\""), std::string::npos);
  EXPECT_NE(a.second.find("a &lt;b&gt; &amp; c"), std::string::npos);
  EXPECT_EQ(a.second.find("<b>"), std::string::npos);
}

TEST(Output, AngleAndNormTables) {
  const auto vocab = make_vocab(3);
  std::vector<PairAngle> angles{{"w0", "w1", 0.5}};
  std::ostringstream os;
  write_angle_tsv(os, angles);
  EXPECT_EQ(os.str(), "word1\tword2\tangle_radians\nw0\tw1\t0.5\n");
  const Mat W = Mat::Identity(static_cast<Index>(vocab.size()), 5);
  std::ostringstream ns;
  write_norm_tsv(ns, norm_report(W, vocab), vocab);
  EXPECT_EQ(ns.str().substr(0, ns.str().find('\n')), "rank\tword\tcount\tnorm");
  EXPECT_EQ(xml_escape("\"x\" 'y'"), "&quot;x&quot; 'y'");
}
