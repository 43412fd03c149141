// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "csmap/concepts.hpp"
#include "csmap/error.hpp"
#include "oracles.hpp"

using namespace csmap;

namespace {

LatentCode code(std::vector<float> mean) {
  return {mean, std::vector<float>(mean.size(), 0.0f), std::nullopt};
}

std::vector<LatentCode> random_codes(std::size_t n, std::size_t d, std::uint64_t seed, float shift = 0.0f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::vector<LatentCode> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> m(d);
    for (auto& v : m) v = g(rng) + shift;
    out.push_back(code(m));
  }
  return out;
}

// Fraction of (pos, neg) pairs ordered correctly, ties counted half.
double pairwise_auc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

}  // namespace

TEST(ConceptFromAttribute, MeanDifference) {
  const std::vector<LatentCode> pos{code({1, 0}), code({3, 0})}, neg{code({0, 2}), code({0, 0})};
  const auto c = concept_from_attribute(pos, neg, "x");
  EXPECT_EQ(c.direction, (std::vector<float>{2, -1}));
  EXPECT_EQ(c.n_pos, 2u);
  EXPECT_EQ(c.n_neg, 2u);
  EXPECT_EQ(c.name, "x");
  EXPECT_EQ(c.provenance, ConceptProvenance::attribute_mean_difference);
  EXPECT_EQ(concept_from_attribute(pos, pos).direction, (std::vector<float>{0, 0}));
}

TEST(ConceptFromAttribute, Errors) {
  const std::vector<LatentCode> pos{code({1, 0})}, none, wide{code({1, 0, 0})};
  EXPECT_THROW(concept_from_attribute(pos, none), DataError);
  EXPECT_THROW(concept_from_attribute(none, pos), DataError);
  EXPECT_THROW(concept_from_attribute(pos, wide), DataError);
  const std::vector<LatentCode> mixed{code({1, 0}), code({1})};
  EXPECT_THROW(concept_from_attribute(mixed, pos), DataError);
}

TEST(ConceptScore, DotProducts) {
  EXPECT_EQ(concept_score(std::vector<float>{2, -1}, std::vector<float>{1, 1}), 1.0);
  EXPECT_EQ(concept_score(std::vector<float>{1, 0}, std::vector<float>{0, 5}), 0.0);
  EXPECT_THROW(concept_score(std::vector<float>{1, 0}, std::vector<float>{1}), DataError);
}

TEST(ConceptProperties, AntisymmetryNegatesScoresAndFlipsAuc) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto pos = random_codes(30, 8, seed, 0.4f), neg = random_codes(25, 8, seed + 100);
    const auto c = concept_from_attribute(pos, neg), r = concept_from_attribute(neg, pos);
    for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(r.direction[k], -c.direction[k]);
    std::vector<double> s, sr;
    std::vector<std::uint8_t> y;
    for (const auto& z : pos) {
      s.push_back(concept_score(c, z.mean));
      sr.push_back(concept_score(r, z.mean));
      y.push_back(1);
    }
    for (const auto& z : neg) {
      s.push_back(concept_score(c, z.mean));
      sr.push_back(concept_score(r, z.mean));
      y.push_back(0);
    }
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(sr[i], -s[i]);
    EXPECT_NEAR(auc(sr, y), 1.0 - auc(s, y), 1e-12);
    // Ranking is exactly reversed.
    std::vector<std::size_t> order(s.size()), rorder(s.size());
    std::iota(order.begin(), order.end(), 0u);
    std::iota(rorder.begin(), rorder.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return s[a] < s[b]; });
    std::stable_sort(rorder.begin(), rorder.end(), [&](auto a, auto b) { return sr[a] > sr[b]; });
    EXPECT_EQ(order, rorder);
  }
}

TEST(ConceptProperties, PositiveScalingKeepsRankingAndAuc) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.1f, 10.0f);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto codes = random_codes(60, 6, seed);
    const auto dir = random_codes(1, 6, seed + 77).front().mean;
    const float alpha = u(rng);
    std::vector<float> scaled(dir);
    for (auto& v : scaled) v *= alpha;
    std::vector<double> s, ss;
    std::vector<std::uint8_t> y;
    for (std::size_t i = 0; i < codes.size(); ++i) {
      s.push_back(concept_score(dir, codes[i].mean));
      ss.push_back(concept_score(scaled, codes[i].mean));
      y.push_back(i % 3 == 0);
      EXPECT_NEAR(ss.back(), alpha * s.back(), 1e-5 * (1 + std::abs(alpha * s.back())));
    }
    EXPECT_DOUBLE_EQ(auc(ss, y), auc(s, y));
  }
}

TEST(ConceptProperties, ScoreIsBilinear) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto v = random_codes(4, 12, seed);
    const auto& a = v[0].mean;
    const auto& b = v[1].mean;
    const auto& z = v[2].mean;
    const auto& w = v[3].mean;
    const double alpha = 0.75, beta = -1.5;
    std::vector<float> ab(12), zw(12);
    for (std::size_t k = 0; k < 12; ++k) {
      ab[k] = static_cast<float>(alpha * a[k] + beta * b[k]);
      zw[k] = static_cast<float>(alpha * z[k] + beta * w[k]);
    }
    EXPECT_NEAR(concept_score(ab, z), alpha * concept_score(a, z) + beta * concept_score(b, z), 1e-5);
    EXPECT_NEAR(concept_score(a, zw), alpha * concept_score(a, z) + beta * concept_score(a, w), 1e-5);
    // S(z + alpha z_c) - S(z) = alpha |z_c|^2
    std::vector<float> shifted(12);
    for (std::size_t k = 0; k < 12; ++k) shifted[k] = static_cast<float>(z[k] + alpha * a[k]);
    EXPECT_NEAR(concept_score(a, shifted) - concept_score(a, z), alpha * concept_score(a, a), 1e-5);
  }
}

TEST(Pearson, Examples) {
  const std::vector<double> a{1, 2, 3, 4, 5}, b{2, 4, 6, 8, 10}, c{-1, -2, -3, -4, -5}, flat{3, 3, 3, 3, 3};
  EXPECT_NEAR(*pearson(a, b), 1.0, 1e-15);
  EXPECT_NEAR(*pearson(a, a), 1.0, 1e-15);
  EXPECT_NEAR(*pearson(a, c), -1.0, 1e-15);
  EXPECT_FALSE(pearson(a, flat).has_value());
  EXPECT_THROW(pearson(a, std::vector<double>{1, 2}), DataError);
  // Reference value: numpy.corrcoef([1,2,3,4,5],[2,1,4,3,5])[0,1] = 0.8
  EXPECT_NEAR(*pearson(a, std::vector<double>{2, 1, 4, 3, 5}), 0.8, 1e-15);
}

TEST(ConceptFromCorrelation, SelectsMostCorrelatedAndExcludesAnchors) {
  std::vector<LatentCode> codes{code({1, 2, 3, 4}),  code({2, 4, 6, 8.5f}), code({-1, -2, -3, -4}),
                                code({4, 3, 2, 1}),  code({1, 2, 3, 5}),    code({7, 7, 7, 7}),
                                code({1, 2.5f, 3, 4})};
  const std::vector<std::string> ids{"a", "b", "neg", "rev", "c", "flat", "d"};
  const std::vector<std::string> anchors{"a"};
  const auto r = concept_from_correlation(codes, ids, anchors, 3, "layer");
  EXPECT_TRUE(std::isnan(r.correlations[0]));
  EXPECT_TRUE(std::isnan(r.correlations[5]));
  EXPECT_EQ(r.excluded_zero_variance, 1u);
  EXPECT_NEAR(r.correlations[2], -1.0, 1e-12);
  ASSERT_EQ(r.selected.size(), 3u);
  for (std::size_t i = 0; i + 1 < r.selected.size(); ++i)
    EXPECT_GE(r.correlations[r.selected[i]], r.correlations[r.selected[i + 1]]);
  std::vector<std::size_t> sel = r.selected;
  std::sort(sel.begin(), sel.end());
  EXPECT_EQ(sel, (std::vector<std::size_t>{1, 4, 6}));
  std::vector<float> expect(4, 0.0f);
  for (std::size_t i : sel)
    for (std::size_t k = 0; k < 4; ++k) expect[k] += codes[i].mean[k] / 3.0f;
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(r.concept_vector.direction[k], expect[k], 1e-6);
  EXPECT_EQ(r.concept_vector.provenance, ConceptProvenance::correlation_top_k);
  EXPECT_EQ(r.concept_vector.n_pos, 3u);
  EXPECT_EQ(r.concept_vector.name, "layer");
  EXPECT_EQ(r.concept_vector.details.at("k"), 3);
}

TEST(ConceptFromCorrelation, AnchorSetUsesMeanVector) {
  std::vector<LatentCode> codes{code({1, 0, 0, 0}), code({0, 1, 0, 0}), code({1, 1, 0, 0}), code({0, 0, 1, 1})};
  const std::vector<std::string> ids{"p", "q", "both", "other"};
  const std::vector<std::string> anchors{"p", "q"};
  const auto r = concept_from_correlation(codes, ids, anchors, 1);
  EXPECT_NEAR(r.correlations[2], 1.0, 1e-12);
  EXPECT_EQ(r.selected, (std::vector<std::size_t>{2}));
}

TEST(ConceptFromCorrelation, RankingInvariantToPositiveAffineRescaling) {
  const auto codes = random_codes(40, 10, 8);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < codes.size(); ++i) ids.push_back("s" + std::to_string(i));
  std::vector<LatentCode> scaled = codes;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> slope(0.5f, 4.0f), shift(-3.0f, 3.0f);
  for (std::size_t i = 1; i < scaled.size(); ++i) {
    const float a = slope(rng), b = shift(rng);
    for (auto& v : scaled[i].mean) v = a * v + b;
  }
  const std::vector<std::string> anchors{"s0"};
  const auto r1 = concept_from_correlation(codes, ids, anchors, 10);
  const auto r2 = concept_from_correlation(scaled, ids, anchors, 10);
  EXPECT_EQ(r1.selected, r2.selected);
  for (std::size_t i = 1; i < codes.size(); ++i) EXPECT_NEAR(r1.correlations[i], r2.correlations[i], 1e-5);
}

TEST(ConceptFromCorrelation, Errors) {
  const auto codes = random_codes(5, 4, 1);
  const std::vector<std::string> ids{"a", "b", "c", "d", "e"};
  const std::vector<std::string> good{"a"}, bad{"zz"}, none;
  EXPECT_THROW(concept_from_correlation(codes, ids, bad, 2), DataError);
  EXPECT_THROW(concept_from_correlation(codes, ids, none, 2), UsageError);
  EXPECT_THROW(concept_from_correlation(codes, ids, good, 5), UsageError);
  EXPECT_THROW(concept_from_correlation(codes, ids, good, 0), UsageError);
  EXPECT_NO_THROW(concept_from_correlation(codes, ids, good, 4));
}

TEST(Auc, ExtremesTiesAndOracle) {
  EXPECT_EQ(auc(std::vector<double>{3, 4, 1, 2}, std::vector<std::uint8_t>{1, 1, 0, 0}), 1.0);
  EXPECT_EQ(auc(std::vector<double>{1, 2, 3, 4}, std::vector<std::uint8_t>{1, 1, 0, 0}), 0.0);
  EXPECT_EQ(auc(std::vector<double>{1, 1, 1, 1}, std::vector<std::uint8_t>{1, 0, 1, 0}), 0.5);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> u(0, 9);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(57);
    std::vector<std::uint8_t> y(57);
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = u(rng);  // many ties
      y[i] = static_cast<std::uint8_t>(i % 4 == 0 || u(rng) > 6);
    }
    EXPECT_NEAR(auc(s, y), pairwise_auc(s, y), 1e-12);
  }
  EXPECT_THROW(auc(std::vector<double>{1, 2}, std::vector<std::uint8_t>{1, 1}), DataError);
  EXPECT_THROW(auc(std::vector<double>{1, 2}, std::vector<std::uint8_t>{1}), DataError);
}

TEST(Auc, ShuffledLabelsNearHalf) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g;
  std::vector<double> s(4000);
  std::vector<std::uint8_t> y(4000);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = g(rng);
    y[i] = i % 2;
  }
  std::shuffle(y.begin(), y.end(), rng);
  // Null standard deviation is sqrt((n1+n2+1)/(12 n1 n2)) ~ 0.0091; allow 4 sigma.
  EXPECT_NEAR(auc(s, y), 0.5, 0.037);
}

TEST(ScoreReport, HistogramGapAndJson) {
  const std::vector<double> s{0.0, 1.0, 2.0, 10.0, 11.0, 12.0};
  const std::vector<std::uint8_t> y{0, 0, 0, 1, 1, 1};
  const auto r = score_report(s, y, "sq", 4);
  EXPECT_EQ(r.auc, 1.0);
  EXPECT_DOUBLE_EQ(r.mean_positive, 11.0);
  EXPECT_DOUBLE_EQ(r.mean_negative, 1.0);
  // Pooled sd with n-2 dof: both groups have variance 1.
  EXPECT_DOUBLE_EQ(r.mean_gap, 10.0);
  EXPECT_EQ(r.histogram.lo, 0.0);
  EXPECT_EQ(r.histogram.hi, 12.0);
  EXPECT_EQ(r.histogram.negative, (std::vector<std::size_t>{3, 0, 0, 0}));
  EXPECT_EQ(r.histogram.positive, (std::vector<std::size_t>{0, 0, 0, 3}));
  const auto j = to_json(r);
  EXPECT_EQ(j.at("auc"), 1.0);
  EXPECT_EQ(j.at("scores").size(), 6u);
  EXPECT_EQ(j.at("concept"), "sq");
  EXPECT_EQ(score_report(s, y).histogram.positive.size(), 50u);
  EXPECT_THROW(score_report(s, std::vector<std::uint8_t>(6, 0)), DataError);
}

TEST(ConceptIo, RoundTrip) {
  oracle::TempDir dir("concept");
  ConceptVector c;
  c.direction = {0.25f, -1.5f, 3.0e-7f};
  c.name = "layer1";
  c.provenance = ConceptProvenance::correlation_top_k;
  c.n_pos = 10;
  c.details = {{"anchors", {"g0"}}, {"k", 10}};
  save_concept(c, dir / "c.bin");
  const auto r = load_concept(dir / "c.bin");
  EXPECT_EQ(r.direction, c.direction);
  EXPECT_EQ(r.name, c.name);
  EXPECT_EQ(r.provenance, c.provenance);
  EXPECT_EQ(r.n_pos, 10u);
  EXPECT_EQ(r.details, c.details);
}
