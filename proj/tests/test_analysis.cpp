#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "flashblock/analysis.hpp"
#include "flashblock/errors.hpp"
#include "test_support.hpp"

namespace flashblock {
namespace {

double cos_oracle(std::span<const double> a, std::span<const double> b) {
  long double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<long double>(a[i]) * b[i];
    aa += static_cast<long double>(a[i]) * a[i];
    bb += static_cast<long double>(b[i]) * b[i];
  }
  return static_cast<double>(ab / std::sqrt(aa * bb));
}

TEST(PairwiseStepSimilarity, IdenticalStepsHaveUnitDiagonal) {
  std::mt19937_64 rng(1);
  const auto x = testing::random_tensor(6, 5, rng);
  const auto s = pairwise_step_similarity(x, x);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(s(i, i), 1.0, 1e-12);
  EXPECT_NEAR(mean_diagonal_similarity(x, x), 1.0, 1e-12);
}

TEST(PairwiseStepSimilarity, OrthogonalRowsGiveZero) {
  const auto a = Tensor2D::from_rows({{1, 0, 0}, {0, 1, 0}});
  const auto b = Tensor2D::from_rows({{0, 0, 1}, {0, 0, -2}});
  const auto s = pairwise_step_similarity(a, b);
  for (double v : s.data()) EXPECT_EQ(v, 0.0);
}

TEST(PairwiseStepSimilarity, IndexOrientation) {
  const auto step_s = Tensor2D::from_rows({{1, 0}, {1, 1}});
  const auto step_s1 = Tensor2D::from_rows({{0, 1}, {1, 0}});
  const auto s = pairwise_step_similarity(step_s, step_s1);
  const double r = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(s(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(s(0, 1), r, 1e-15);
  EXPECT_NEAR(s(1, 0), 1.0, 1e-15);
  EXPECT_NEAR(s(1, 1), r, 1e-15);
  EXPECT_NEAR(mean_diagonal_similarity(step_s, step_s1), r / 2, 1e-15);
}

TEST(PairwiseStepSimilarity, MatchesPerEntryOracleAndStaysInRange) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = 1 + rng() % 10, d = 1 + rng() % 20;
    const auto x = testing::random_tensor(b, d, rng);
    const auto y = testing::random_tensor(b, d, rng);
    const auto s = pairwise_step_similarity(x, y);
    ASSERT_EQ(s.rows(), b);
    ASSERT_EQ(s.cols(), b);
    double diag = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < b; ++j) {
        EXPECT_NEAR(s(i, j), cos_oracle(x.row(j), y.row(i)), 1e-12);
        EXPECT_GE(s(i, j), -1.0);
        EXPECT_LE(s(i, j), 1.0);
      }
      diag += s(i, i);
    }
    EXPECT_NEAR(mean_diagonal_similarity(x, y), diag / static_cast<double>(b), 1e-12);
  }
}

TEST(PairwiseStepSimilarity, ShapeMismatchThrows) {
  EXPECT_THROW(pairwise_step_similarity(Tensor2D(2, 3), Tensor2D(3, 3)), ShapeError);
}

ModelConfig small_model(bool positional = true) {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.head_dim = 8;
  cfg.vocab_size = 64;
  cfg.seed = 31;
  cfg.positional = positional;
  return cfg;
}

TEST(StabilityStudy, OutputSizes) {
  SyntheticModel model(small_model());
  StabilityConfig cfg;
  cfg.prompt_len = 32;
  cfg.steps = 4;
  const auto study = stability_study(model, cfg);
  EXPECT_EQ(study.summary.size(), 4u * 3);
  EXPECT_EQ(study.full.size(), 4u * 3 * 8 * 8);
  for (const auto& r : study.summary) {
    EXPECT_LT(r.step, 3u);
    EXPECT_GE(r.mean_diag_out, -1.0);
    EXPECT_LE(r.mean_diag_out, 1.0);
    EXPECT_GE(r.mean_diag_in, -1.0);
    EXPECT_LE(r.mean_diag_in, 1.0);
  }
}

TEST(StabilityStudy, SingleStepHasNoPairs) {
  SyntheticModel model(small_model());
  StabilityConfig cfg;
  cfg.prompt_len = 16;
  cfg.steps = 1;
  const auto study = stability_study(model, cfg);
  EXPECT_TRUE(study.summary.empty());
  EXPECT_TRUE(study.full.empty());
  EXPECT_TRUE(std::isnan(study.fraction_external_more_stable()));
  cfg.steps = 0;
  EXPECT_THROW(stability_study(model, cfg), ConfigError);
}

TEST(StabilityStudy, UniformContextWithNoisyBlockValues) {
  SyntheticModel model(small_model(false));
  for (std::size_t l = 0; l < 2; ++l) {
    for (std::size_t h = 0; h < 2; ++h) model.set_head_fixture(l, h, {false, 0.0, 3.0});
  }
  StabilityConfig cfg;
  cfg.prompt = std::vector<TokenId>(32, 7);
  cfg.steps = 8;
  const auto study = stability_study(model, cfg);
  for (const auto& r : study.summary) {
    EXPECT_NEAR(r.mean_diag_out, 1.0, 1e-9);
    EXPECT_LT(r.mean_diag_in, 0.9);
  }
  EXPECT_EQ(study.fraction_external_more_stable(), 1.0);
}

TEST(StabilityStudy, CsvHeaders) {
  SyntheticModel model(small_model());
  StabilityConfig cfg;
  cfg.prompt_len = 16;
  cfg.steps = 2;
  const auto study = stability_study(model, cfg);
  std::ostringstream full, summary;
  write_similarity_full_csv(full, study.full);
  write_similarity_summary_csv(summary, study.summary);
  EXPECT_EQ(full.str().substr(0, full.str().find('\n')), "layer,head,step,i,j,sim");
  EXPECT_EQ(summary.str().substr(0, summary.str().find('\n')),
            "layer,head,step,mean_diag_out,mean_diag_in");
}

}  // namespace
}  // namespace flashblock
