#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "flashblock/block_source.hpp"
#include "flashblock/errors.hpp"
#include "flashblock/sparse.hpp"
#include "test_support.hpp"

namespace flashblock {
namespace {

struct Problem {
  Tensor2D q, keys, values;
  std::size_t ctx;
  double scale;
};

Problem random_problem(std::mt19937_64& rng, std::size_t ctx, std::size_t block = 8,
                       std::size_t dim = 16, double spread = 2.0) {
  return {testing::random_tensor(block, dim, rng, -spread, spread),
          testing::random_tensor(ctx + block, dim, rng, -spread, spread),
          testing::random_tensor(ctx + block, dim, rng), ctx, default_scale(dim)};
}

SparseMask mask_for(const Problem& p, double density, std::size_t kbs, std::size_t block_id = 0) {
  return build_sparse_mask(block_id, p.q, p.keys, p.ctx, density, kbs, p.scale);
}

// Brute-force ranking: full softmax per query, mass summed per context block.
std::vector<std::size_t> oracle_top_blocks(const Problem& p, std::size_t kbs, std::size_t k) {
  const std::size_t nblocks = (p.ctx + kbs - 1) / kbs;
  std::vector<double> mass(nblocks, 0.0);
  for (std::size_t i = 0; i < p.q.rows(); ++i) {
    std::vector<double> w(p.keys.rows());
    for (std::size_t j = 0; j < w.size(); ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < p.q.cols(); ++c) s += p.q(i, c) * p.keys(j, c);
      w[j] = std::exp(s * p.scale);
    }
    const double z = std::accumulate(w.begin(), w.end(), 0.0);
    for (std::size_t j = 0; j < p.ctx; ++j) mass[j / kbs] += w[j] / z;
  }
  std::vector<std::size_t> order(nblocks);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return mass[a] > mass[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

TEST(SelectKeyBlocks, MatchesBruteForceRanking) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_problem(rng, 96);
    for (double d : {0.1, 0.3, 0.5}) {
      const std::size_t k = static_cast<std::size_t>(std::ceil(d * 96 / 16 - 1e-9));
      EXPECT_EQ(select_key_blocks(p.q, p.keys, p.ctx, d, 16, p.scale), oracle_top_blocks(p, 16, k));
    }
  }
}

TEST(SelectKeyBlocks, PicksHighMassBlock) {
  std::mt19937_64 rng(2);
  auto p = random_problem(rng, 64, 4, 8, 0.1);
  for (std::size_t j = 32; j < 48; ++j) {
    for (std::size_t c = 0; c < 8; ++c) p.keys(j, c) = 0.0;
  }
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < 8; ++c) p.q(i, c) = 1.0;
  }
  for (std::size_t j = 32; j < 48; ++j) p.keys(j, 0) = 6.0;
  // Just under one block's worth of density still selects exactly one block.
  const auto sel = select_key_blocks(p.q, p.keys, p.ctx, 0.25 - 1e-6, 16, p.scale);
  EXPECT_EQ(sel, (std::vector<std::size_t>{2}));
}

TEST(SelectKeyBlocks, CountFollowsDensity) {
  std::mt19937_64 rng(3);
  const auto p = random_problem(rng, 100);
  EXPECT_EQ(select_key_blocks(p.q, p.keys, p.ctx, 1.0, 16, p.scale).size(), 7u);
  EXPECT_EQ(select_key_blocks(p.q, p.keys, p.ctx, 1e-6, 16, p.scale).size(), 1u);
  EXPECT_EQ(select_key_blocks(p.q, p.keys, p.ctx, 0.5, 16, p.scale).size(), 4u);
  EXPECT_THROW(select_key_blocks(p.q, p.keys, p.ctx, 0.0, 16, p.scale), ConfigError);
  EXPECT_THROW(select_key_blocks(p.q, p.keys, p.ctx, 1.5, 16, p.scale), ConfigError);
}

TEST(SparseMask, RealizedDensityBound) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t ctx = 20 + rng() % 200;
    const auto p = random_problem(rng, ctx);
    std::uniform_real_distribution<double> dens(0.01, 1.0);
    const double d = dens(rng);
    const auto m = mask_for(p, d, 16);
    const double realized = m.realized_density(0, 0);
    EXPECT_GE(realized, std::min(d, 1.0) - 1e-12);
    EXPECT_LE(realized, d + 16.0 / static_cast<double>(ctx) + 1e-12);
  }
}

TEST(SparseMask, SelectionValidation) {
  SparseMask m(0, 0.5, 16, 64, 1, 1);
  EXPECT_THROW(m.set_selection(0, 0, {4}), BoundsError);
  EXPECT_THROW(m.set_selection(1, 0, {0}), BoundsError);
  m.set_selection(0, 0, {3, 1, 1});
  EXPECT_EQ(m.selection(0, 0), (std::vector<std::size_t>{1, 3}));
  EXPECT_TRUE(m.is_selected(0, 0, 16));
  EXPECT_FALSE(m.is_selected(0, 0, 32));
  EXPECT_EQ(m.selected_context_keys(0, 0), 32u);
  EXPECT_THROW(SparseMask(0, 0.0, 16, 64, 1, 1), ConfigError);
  EXPECT_THROW(SparseMask(0, 0.5, 0, 64, 1, 1), ConfigError);
}

TEST(SparseAttention, FullDensityEqualsDense) {
  std::mt19937_64 rng(5);
  const auto p = random_problem(rng, 80);
  const auto m = mask_for(p, 1.0, 16);
  TensorKvSource<double> src(p.keys, p.values);
  const auto out = sparse_attention_only(p.q, m, 0, 0, 0, src, p.scale);
  EXPECT_LT(max_abs_diff(out, attention_dense(p.q, p.keys, p.values, p.scale)), 1e-12);
}

TEST(SparseAttention, SelectedAndResidualPartitionAllKeys) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_problem(rng, 40 + rng() % 120);
    const auto m = mask_for(p, 0.3, 16);
    TensorKvSource<double> src(p.keys, p.values);
    const auto first = sparse_attention_with_residual(p.q, m, 0, 0, 0, src, nullptr, p.scale,
                                                      {7, 0.0});
    const auto dense = attention_dense(p.q, p.keys, p.values, p.scale);
    EXPECT_LT(max_abs_diff(first.output, dense), 1e-10);
    // Reusing the residual with unchanged inputs reproduces the dense output.
    TensorKvSource<double> src2(p.keys, p.values);
    const auto again =
        sparse_attention_with_residual(p.q, m, 0, 0, 0, src2, &first.residual, p.scale);
    EXPECT_LT(max_abs_diff(again.output, dense), 1e-10);
  }
}

TEST(SparseAttention, ResidualNeverWorseThanSparseOnly) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_problem(rng, 128);
    const auto m = mask_for(p, 0.2, 16);
    TensorKvSource<double> src(p.keys, p.values);
    const auto first = sparse_attention_with_residual(p.q, m, 0, 0, 0, src, nullptr, p.scale);
    // Next step: queries drift a little, context stays.
    auto q2 = p.q;
    std::normal_distribution<double> noise(0.0, 0.05);
    for (auto& x : q2.data()) x += noise(rng);
    const auto dense = attention_dense(q2, p.keys, p.values, p.scale);
    TensorKvSource<double> a(p.keys, p.values), b(p.keys, p.values);
    const auto with_res =
        sparse_attention_with_residual(q2, m, 0, 0, 0, a, &first.residual, p.scale).output;
    const auto only = sparse_attention_only(q2, m, 0, 0, 0, b, p.scale);
    EXPECT_LE(mean_abs_diff(with_res, dense), mean_abs_diff(only, dense));
  }
}

TEST(SparseAttention, ReadsOnlySelectedContextRows) {
  std::mt19937_64 rng(8);
  const std::size_t ctx = 96, dim = 8;
  KvCache kv(1, 1, dim);
  const auto ck = testing::random_tensor(ctx, dim, rng), cv = testing::random_tensor(ctx, dim, rng);
  kv.commit_block(0, 0, ck, cv);
  const auto bk = testing::random_tensor(8, dim, rng), bv = testing::random_tensor(8, dim, rng);
  const auto q = testing::random_tensor(8, dim, rng);
  auto all_keys = ck;
  all_keys.append_rows(bk);
  const auto m = build_sparse_mask(0, q, all_keys, ctx, 0.25, 16, default_scale(dim));

  BlockCausalSource first_src(kv, 0, 0, ctx, bk, bv);
  const auto first =
      sparse_attention_with_residual(q, m, 0, 0, 0, first_src, nullptr, default_scale(dim));
  const auto before = kv.snapshot_counters();
  BlockCausalSource src(kv, 0, 0, ctx, bk, bv);
  sparse_attention_with_residual(q, m, 0, 0, 0, src, &first.residual, default_scale(dim));
  const auto delta = kv.snapshot_counters() - before;
  EXPECT_EQ(delta.key_rows_read, m.selected_context_keys(0, 0));
  EXPECT_EQ(delta.key_rows_read, 32u);
  EXPECT_EQ(src.local_rows_read(), 8u);
}

TEST(SparseAttention, StaleMaskRejected) {
  std::mt19937_64 rng(9);
  const auto p = random_problem(rng, 64);
  const auto m = mask_for(p, 0.5, 16, 3);
  TensorKvSource<double> src(p.keys, p.values);
  EXPECT_THROW(sparse_attention_only(p.q, m, 0, 0, 4, src, p.scale), StalenessError);
  const auto longer = random_problem(rng, 80);
  TensorKvSource<double> src2(longer.keys, longer.values);
  EXPECT_THROW(sparse_attention_only(p.q, m, 0, 0, 3, src2, p.scale), StalenessError);
}

SparseGapConfig small_gap_config() {
  SparseGapConfig cfg;
  cfg.prompt_len = 96;
  cfg.num_seeds = 2;
  return cfg;
}

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.head_dim = 8;
  cfg.vocab_size = 64;
  cfg.seed = 21;
  return cfg;
}

TEST(MeasureSparseGap, ResidualDominatesAndFullDensityIsExact) {
  SyntheticModel model(small_model());
  const std::vector<double> densities{0.1, 0.3, 1.0};
  const auto rows = measure_sparse_gap(model, densities, small_gap_config());
  ASSERT_EQ(rows.size(), 6u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].density, densities[i / 2]);
    EXPECT_EQ(rows[i].seed, i % 2);
    EXPECT_LE(rows[i].l1_with_residual, rows[i].l1_sparse_only + 1e-12);
  }
  EXPECT_LT(rows[4].l1_sparse_only, 1e-12);
  EXPECT_LT(rows[4].l1_with_residual, 1e-12);

  std::ostringstream os;
  write_gap_csv(os, rows);
  EXPECT_NE(os.str().find("density,l1_sparse_only,l1_with_residual,seed\n"), std::string::npos);
}

TEST(MeasureSparseGap, RejectsBadInputs) {
  SyntheticModel model(small_model());
  auto cfg = small_gap_config();
  const std::vector<double> bad{0.0};
  EXPECT_THROW(measure_sparse_gap(model, bad, cfg), ConfigError);
  cfg.layer = 5;
  const std::vector<double> ok{0.5};
  EXPECT_THROW(measure_sparse_gap(model, ok, cfg), BoundsError);
}

}  // namespace
}  // namespace flashblock
