// SPDX-License-Identifier: Apache-2.0
// Checks that need a trained model. One bright-square model and one ST model
// are trained once per process and shared.
#include <gtest/gtest.h>

#include <cmath>

#include "experiments.hpp"

using namespace csmap;

namespace {

const experiment::SquaresRun& squares() {
  static const experiment::SquaresRun run = experiment::run_squares({});
  return run;
}

const experiment::StRun& st() {
  static const experiment::StRun run = experiment::run_st({});
  return run;
}

}  // namespace

TEST(TrainedSquares, FinalEpochLossBelowFirst) {
  const auto& h = squares().model.training().history;
  ASSERT_EQ(h.size(), 30u);
  EXPECT_LT(h.back().total, h.front().total);
  for (const auto& e : h) EXPECT_TRUE(std::isfinite(e.total));
}

TEST(TrainedSquares, HeldOutMeansSeparateInSomeCoordinate) {
  const auto& run = squares();
  const auto codes = encode_dataset(run.model, run.test_set);
  const auto& lab = run.test_set.label("square");
  double best = 0.0;
  for (std::size_t k = 0; k < run.model.latent_dim(); ++k) {
    double s[2] = {0, 0}, ss[2] = {0, 0}, n[2] = {0, 0};
    for (std::size_t i = 0; i < codes.size(); ++i) {
      const double v = codes[i].mean[k];
      s[lab[i]] += v;
      ss[lab[i]] += v * v;
      n[lab[i]] += 1;
    }
    const double m0 = s[0] / n[0], m1 = s[1] / n[1];
    const double pooled_var = (ss[0] - n[0] * m0 * m0 + ss[1] - n[1] * m1 * m1) / (n[0] + n[1] - 2);
    const double se = std::sqrt(pooled_var * (1 / n[0] + 1 / n[1]));
    best = std::max(best, std::abs(m1 - m0) / se);
  }
  EXPECT_GT(best, 3.0);
}

// Known failure: with the plain ELBO this data collapses the posterior and the
// decoder learns roughly the mean image. Kept as a live check, not disabled.
TEST(TrainedSquares, ReconstructionBeatsMeanImageBaseline) {
  const auto r = experiment::reconstruction_vs_baseline(squares());
  EXPECT_LT(r.model_mse, r.baseline_mse);
}

TEST(TrainedSquares, HeldOutConceptAuc) {
  EXPECT_GE(squares().test_report.auc, 0.95);
}

TEST(TrainedSquares, ReencodedScoreRisesWithAlpha) {
  const std::vector<double> alphas{0.0, 0.5, 1.0, 2.0};
  EXPECT_GE(experiment::monotone_share(squares(), alphas), 0.8);
}

TEST(TrainedSt, CorrelationConceptsArePure) {
  for (const auto& a : st().anchors) EXPECT_GE(a.purity, 0.9) << a.anchor;
}
