#include <cmath>
#include <numbers>
#include <sstream>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include "doctest.h"
#include "support.hpp"
#include "wolab/analysis.hpp"

using namespace wolab;

namespace {

double pearson(const MatD& t, Eigen::Index a, Eigen::Index b) {
  const double n = static_cast<double>(t.cols());
  double ma = 0, mb = 0;
  for (Eigen::Index k = 0; k < t.cols(); ++k) {
    ma += t(a, k) / n;
    mb += t(b, k) / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (Eigen::Index k = 0; k < t.cols(); ++k) {
    sab += (t(a, k) - ma) * (t(b, k) - mb);
    saa += (t(a, k) - ma) * (t(a, k) - ma);
    sbb += (t(b, k) - mb) * (t(b, k) - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

MatD random_table(Eigen::Index p, Eigen::Index d, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd;
  MatD t(p, d);
  for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = nd(rng);
  return t;
}

// Entry (i, j) depends only on |i - j|.
MatD toeplitz(Eigen::Index p, const std::function<double(Eigen::Index)>& f) {
  MatD c(p, p);
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = 0; j < p; ++j) c(i, j) = f(std::abs(i - j));
  return c;
}

ModelConfig analysis_model(PositionMode mode) {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.max_positions = 40;
  c.vocab_size = 30;
  c.position_mode = mode;
  c.seed = 4;
  return c;
}

void check_xml(const std::string& svg) {
  std::istringstream in(svg);
  boost::property_tree::ptree tree;
  CHECK_NOTHROW(boost::property_tree::read_xml(in, tree));
  CHECK(tree.count("svg") == 1);
}

}  // namespace

TEST_SUITE("analysis") {

TEST_CASE("correlation matrix against a direct computation") {
  const MatD t = random_table(7, 12, 71);
  const MatD c = correlation_matrix(t);
  for (Eigen::Index i = 0; i < 7; ++i) {
    CHECK(c(i, i) == doctest::Approx(1.0));
    for (Eigen::Index j = 0; j < 7; ++j) CHECK(c(i, j) == doctest::Approx(pearson(t, i, j)).epsilon(1e-12));
  }
  CHECK((c - c.transpose()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("correlation of a hand-computed table") {
  MatD t(3, 3);
  t << 1, 2, 3, 3, 2, 1, 0, 0, 1;
  const MatD c = correlation_matrix(t);
  CHECK(c(0, 1) == doctest::Approx(-1.0));
  CHECK(c(0, 2) == doctest::Approx(std::sqrt(3.0) / 2.0));
  CHECK(c(1, 2) == doctest::Approx(-std::sqrt(3.0) / 2.0));
  MatD flat(2, 3);
  flat << 1, 1, 1, 1, 2, 3;
  const MatD cf = correlation_matrix(flat);
  CHECK(cf(0, 0) == 1.0);
  CHECK(cf(0, 1) == 0.0);
}

TEST_CASE("dot products") {
  MatD t(2, 2);
  t << 1, 2, 3, 4;
  const MatD d = dot_product_matrix(t);
  CHECK(d(0, 1) == 11.0);
  CHECK(d(1, 1) == 25.0);
}

TEST_CASE("position tables") {
  const auto learned = init_model(analysis_model(PositionMode::Learned));
  const MatD p = position_table(learned);
  CHECK(p.rows() == 40);
  CHECK(p.cols() == 16);
  CHECK(position_correlation_matrix(learned, 10).rows() == 10);
  const auto fixed = init_model(analysis_model(PositionMode::Sinusoidal));
  CHECK(position_table(fixed)(3, 0) == doctest::Approx(std::sin(3.0)));
  try {
    position_table(init_model(analysis_model(PositionMode::None)));
    FAIL("expected InvalidArgument");
  } catch (const InvalidArgument& e) {
    CHECK(std::string(e.what()).find("no position table") != std::string::npos);
  }
}

TEST_CASE("Toeplitz matrices are perfectly translation invariant") {
  const MatD c = toeplitz(40, [](Eigen::Index k) { return std::exp(-0.2 * static_cast<double>(k)); });
  const auto s = banding_scores(c);
  CHECK(s.translation_invariance == doctest::Approx(1.0));
  CHECK(s.monotonicity == 1.0);
  REQUIRE(s.profile.size() == kBandingWindow + 2);
  CHECK(s.profile[3] == doctest::Approx(std::exp(-0.6)));
}

TEST_CASE("banding of a sinusoidal table follows an independent loop") {
  const MatD t = position_table(init_model(analysis_model(PositionMode::Sinusoidal)));
  const MatD c = correlation_matrix(t);
  const auto s = banding_scores(c, 8);
  const Eigen::Index p = c.rows();
  std::vector<double> a(10, 0.0);
  for (std::size_t k = 0; k < 10; ++k) {
    for (Eigen::Index i = 0; i + static_cast<Eigen::Index>(k) < p; ++i) a[k] += pearson(t, i, i + static_cast<Eigen::Index>(k));
    a[k] /= static_cast<double>(p - static_cast<Eigen::Index>(k));
    CHECK(s.profile[k] == doctest::Approx(a[k]).epsilon(1e-9));
  }
  double mono = 0;
  for (std::size_t k = 1; k <= 8; ++k) mono += std::abs(a[k]) > std::abs(a[k + 1]) ? 1 : 0;
  CHECK(s.monotonicity == doctest::Approx(mono / 8));
}

TEST_CASE("circulant cosine similarity decays monotonically") {
  // Rows are unit phasors e^{i w p}; their correlation is cos(w (p - q)).
  const Eigen::Index p = 64;
  MatD t(p, 2 * 8);
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index f = 0; f < 8; ++f) {
      const double w = 0.02 * static_cast<double>(f + 1);
      t(i, 2 * f) = std::cos(w * static_cast<double>(i));
      t(i, 2 * f + 1) = std::sin(w * static_cast<double>(i));
    }
  const auto s = banding_scores(dot_product_matrix(t) / 8.0);
  CHECK(s.monotonicity == 1.0);
  CHECK(s.translation_invariance == doctest::Approx(1.0));
}

TEST_CASE("i.i.d. embeddings have no band") {
  const auto s = banding_scores(correlation_matrix(random_table(128, 512, 72)));
  for (std::size_t k = 1; k < s.profile.size(); ++k) CHECK(std::abs(s.profile[k]) < 0.02);
  CHECK(s.profile[0] == doctest::Approx(1.0));
}

TEST_CASE("banding needs more rows than the window") {
  CHECK_THROWS_AS(banding_scores(MatD::Identity(17, 17)), InvalidArgument);
  CHECK_NOTHROW(banding_scores(MatD::Identity(18, 18)));
  const auto s = banding_scores(MatD::Constant(30, 30, 0.5));
  CHECK(s.translation_invariance == doctest::Approx(1.0));
}

TEST_CASE("maximum attention offsets") {
  const MatD eye = MatD::Identity(5, 5);
  for (std::size_t q = 0; q < 5; ++q) {
    std::vector<double> r(5);
    for (std::size_t k = 0; k < 5; ++k) r[k] = eye(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(k));
    CHECK(max_attention_offset(r, q, 5) == 0);
  }
  CHECK(max_attention_offset(std::vector<double>{0.1, 0.2, 0.7}, 1, 3) == 1);
  CHECK(max_attention_offset(std::vector<double>{0.4, 0.2, 0.4}, 1, 3) == -1);
  CHECK(max_attention_offset(std::vector<double>{0.5, 0.5, 0.0}, 1, 3) == 0);
  CHECK(max_attention_offset(std::vector<double>{0.1, 0.1, 0.1, 0.9}, 0, 3) == 0);
}

TEST_CASE("offset histogram of identity and superdiagonal attention") {
  OffsetAccumulator acc(2, 1);
  acc.add(0, 0, MatD(MatD::Identity(4, 4)), 4);
  MatD sup = MatD::Zero(4, 4);
  for (int i = 0; i < 3; ++i) sup(i, i + 1) = 1.0;
  sup(3, 2) = 1.0;
  acc.add(1, 0, sup, 4);
  const auto h = acc.finish();
  CHECK(h.pct(0, 0) == doctest::Approx(100.0));
  CHECK(h.pct(1, 1) == doctest::Approx(75.0));
  CHECK(h.pct(1, -1) == doctest::Approx(25.0));
  CHECK(h.pct(1, 5) == 0.0);
  const auto parsed = parse_offset_csv(h.to_csv());
  CHECK(parsed.at({2, 1}) == doctest::Approx(75.0));
}

TEST_CASE("offset percentages of a model sum to 100 per layer") {
  const auto ck = init_model(analysis_model(PositionMode::Learned));
  const auto sents = wolab::testing::synthetic_sentences(40, 73);
  std::vector<TokenSeq> seqs;
  Rng rng(74);
  for (const auto& s : sents) {
    TokenSeq t;
    for (std::size_t w = 0; w < std::min<std::size_t>(s.words.size(), 30); ++w) {
      t.ids.push_back(static_cast<TokenId>(special::kCount + rng() % 25));
      t.word_spans.push_back({w, w + 1});
    }
    seqs.push_back(t);
  }
  const auto h = attention_offset_histogram(ck, seqs, 1);
  const auto h3 = attention_offset_histogram(ck, seqs, 3);
  CHECK(h.to_csv() == h3.to_csv());
  REQUIRE(h.layers == 2);
  for (std::size_t l = 0; l < 2; ++l) {
    double a = 0, b = 0;
    for (const auto& [k, v] : h.max_pct[l]) a += v;
    for (const auto& [k, v] : h.mass_pct[l]) b += v;
    CHECK(a == doctest::Approx(100.0));
    CHECK(b == doctest::Approx(100.0));
  }
}

TEST_CASE("plot layer selection") {
  CHECK(default_plot_layers(12) == std::vector<std::size_t>{1, 2, 7, 8, 11, 12});
  CHECK(default_plot_layers(6) == std::vector<std::size_t>{1, 4, 6});
  CHECK(default_plot_layers(1) == std::vector<std::size_t>{1});
}

TEST_CASE("correlation CSV round-trip is exact") {
  const MatD c = correlation_matrix(random_table(9, 5, 75));
  CHECK(parse_correlation_csv(correlation_csv(c)) == c);
  CHECK_THROWS_AS(parse_correlation_csv("i,j,value\n0,0,abc\n"), FormatError);
}

TEST_CASE("empty charts are valid SVG") {
  check_xml(heatmap_svg(MatD(0, 0), {"t", "x", "y"}));
  check_xml(line_chart_svg({}, {"t", "x", "y"}));
  check_xml(offset_chart_svg(OffsetAccumulator(1, 1).finish(), std::vector<std::size_t>{1}, "empty"));
}

TEST_CASE("random charts parse as XML and are byte deterministic") {
  Rng rng(76);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int k = 0; k < 10; ++k) {
    const MatD c = correlation_matrix(random_table(3 + k, 4, 80 + static_cast<std::uint64_t>(k)));
    const std::string title = "run <" + std::to_string(k) + "> & \"x\"";
    const auto heat = heatmap_svg(c, {title, "i", "j"});
    check_xml(heat);
    CHECK(heat == heatmap_svg(c, {title, "i", "j"}));
    std::vector<Series> series(2);
    for (auto& s : series) {
      s.name = "s&" + std::to_string(k);
      for (int i = 0; i < 5 + k; ++i) s.points.push_back({i, u(rng)});
    }
    check_xml(line_chart_svg(series, {title, "offset", "%"}));
  }
}

}  // TEST_SUITE
