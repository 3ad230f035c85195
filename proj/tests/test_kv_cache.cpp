#include <gtest/gtest.h>

#include <random>
#include <thread>
#include <vector>

#include "flashblock/kv_cache.hpp"
#include "test_support.hpp"

namespace flashblock {
namespace {

TEST(KvCache, FirstCommitRecordsBoundary) {
  KvCache kv(1, 1, 4);
  EXPECT_EQ(kv.commit_block(0, 0, Tensor2D(4, 4, 1.0), Tensor2D(4, 4, 2.0)), 4u);
  EXPECT_EQ(kv.block_boundaries(0, 0), (std::vector<std::size_t>{4}));
}

TEST(KvCache, CommitsAccumulate) {
  KvCache kv(1, 1, 4);
  kv.commit_block(0, 0, Tensor2D(4, 4), Tensor2D(4, 4));
  kv.commit_block(0, 0, Tensor2D(4, 4), Tensor2D(4, 4));
  EXPECT_EQ(kv.block_boundaries(0, 0), (std::vector<std::size_t>{4, 8}));
  EXPECT_EQ(kv.committed_tokens(0, 0), 8u);
  EXPECT_EQ(kv.snapshot_counters().rows_appended, 8u);
  EXPECT_EQ(kv.snapshot_counters().cache_bytes_resident, 2u * 8 * 4 * sizeof(double));
}

TEST(KvCache, CommitShapeErrors) {
  KvCache kv(1, 1, 4);
  EXPECT_THROW(kv.commit_block(0, 0, Tensor2D(4, 4), Tensor2D(3, 4)), ShapeError);
  EXPECT_THROW(kv.commit_block(0, 0, Tensor2D(4, 3), Tensor2D(4, 3)), ShapeError);
  EXPECT_THROW(kv.commit_block(1, 0, Tensor2D(4, 4), Tensor2D(4, 4)), BoundsError);
}

TEST(KvCache, FreshCacheCountersAreZero) {
  KvCache kv(2, 2, 8);
  EXPECT_EQ(kv.snapshot_counters(), AccessCounters{});
}

TEST(KvCache, FullReadCountsEveryRow) {
  KvCache kv(1, 1, 2);
  std::mt19937_64 rng(1);
  const auto k = testing::random_tensor(6, 2, rng);
  const auto v = testing::random_tensor(6, 2, rng);
  kv.commit_block(0, 0, k.slice_rows(0, 3), v.slice_rows(0, 3));
  kv.commit_block(0, 0, k.slice_rows(3, 6), v.slice_rows(3, 6));
  const auto before = kv.snapshot_counters();
  const auto slice = kv.read_range(0, 0, 0, 6);
  const auto delta = kv.snapshot_counters() - before;
  EXPECT_EQ(slice.keys, k);
  EXPECT_EQ(slice.values, v);
  EXPECT_EQ(delta.key_rows_read, 6u);
  EXPECT_EQ(delta.value_rows_read, 6u);
}

TEST(KvCache, EmptyRangeReadsNothing) {
  KvCache kv(1, 1, 2);
  kv.commit_block(0, 0, Tensor2D(4, 2), Tensor2D(4, 2));
  const auto before = kv.snapshot_counters();
  const auto slice = kv.read_range(0, 0, 2, 2);
  EXPECT_EQ(slice.keys.rows(), 0u);
  EXPECT_EQ(kv.snapshot_counters(), before);
}

TEST(KvCache, OutOfRangeReadThrows) {
  KvCache kv(1, 1, 2);
  kv.commit_block(0, 0, Tensor2D(4, 2), Tensor2D(4, 2));
  EXPECT_THROW(kv.read_range(0, 0, 0, 5), BoundsError);
  EXPECT_THROW(kv.read_range(0, 0, 3, 2), BoundsError);
}

TEST(KvCache, PeekIsNotCounted) {
  KvCache kv(1, 1, 2);
  kv.commit_block(0, 0, Tensor2D(4, 2, 1.0), Tensor2D(4, 2, 1.0));
  const auto before = kv.snapshot_counters();
  EXPECT_EQ(kv.peek_range(0, 0, 0, 4).keys.rows(), 4u);
  EXPECT_EQ(kv.snapshot_counters(), before);
}

TEST(KvCache, RepeatedReadsAreBitIdentical) {
  KvCache kv(2, 3, 5);
  std::mt19937_64 rng(9);
  for (std::size_t l = 0; l < 2; ++l) {
    for (std::size_t h = 0; h < 3; ++h) {
      for (int b = 0; b < 3; ++b) {
        kv.commit_block(l, h, testing::random_tensor(4, 5, rng), testing::random_tensor(4, 5, rng));
      }
    }
  }
  for (std::size_t l = 0; l < 2; ++l) {
    for (std::size_t h = 0; h < 3; ++h) {
      const auto a = kv.read_range(l, h, 2, 11);
      const auto b = kv.read_range(l, h, 2, 11);
      EXPECT_EQ(a.keys, b.keys);
      EXPECT_EQ(a.values, b.values);
    }
  }
}

TEST(KvCache, ConcurrentReadersCountExactly) {
  KvCache kv(1, 1, 4);
  kv.commit_block(0, 0, Tensor2D(32, 4, 1.0), Tensor2D(32, 4, 1.0));
  {
    std::vector<std::jthread> readers;
    for (int t = 0; t < 4; ++t) {
      readers.emplace_back([&] {
        for (int i = 0; i < 100; ++i) kv.read_range(0, 0, 0, 32);
      });
    }
  }
  EXPECT_EQ(kv.snapshot_counters().key_rows_read, 4u * 100 * 32);
}

TEST(KvCache, CountersNeverDecrease) {
  KvCache kv(1, 2, 2);
  auto last = kv.snapshot_counters();
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    if (i % 3 == 0) kv.commit_block(0, i % 2, Tensor2D(2, 2), Tensor2D(2, 2));
    const auto n = kv.committed_tokens(0, 0);
    if (n > 0) kv.read_range(0, 0, rng() % n, n);
    const auto now = kv.snapshot_counters();
    EXPECT_GE(now.key_rows_read, last.key_rows_read);
    EXPECT_GE(now.value_rows_read, last.value_rows_read);
    EXPECT_GE(now.rows_appended, last.rows_appended);
    EXPECT_GE(now.cache_bytes_resident, last.cache_bytes_resident);
    last = now;
  }
}

}  // namespace
}  // namespace flashblock
