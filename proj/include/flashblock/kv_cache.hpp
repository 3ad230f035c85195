#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "flashblock/tensor.hpp"

namespace flashblock {

/// Aggregate KV-cache traffic. Every field only grows within a run; per-step
/// figures come from differencing two snapshots.
struct AccessCounters {
  std::uint64_t key_rows_read = 0;
  std::uint64_t value_rows_read = 0;
  std::uint64_t rows_appended = 0;
  std::uint64_t cache_bytes_resident = 0;

  friend AccessCounters operator-(const AccessCounters& a, const AccessCounters& b) {
    return {a.key_rows_read - b.key_rows_read, a.value_rows_read - b.value_rows_read,
            a.rows_appended - b.rows_appended, a.cache_bytes_resident - b.cache_bytes_resident};
  }
  friend bool operator==(const AccessCounters&, const AccessCounters&) = default;
};

struct KvSlice {
  Tensor2D keys;
  Tensor2D values;
};

/// Append-only per-(layer, head) key/value store for committed blocks.
///
/// Only finished blocks live here; the block being denoised keeps its K/V in
/// step-local buffers. Reads through `read_range` are counted, `peek_range`
/// is an uninstrumented view reserved for verification oracles.
///
/// One writer per sequence. Concurrent `read_range` calls are safe once
/// commits have stopped; the counters themselves are atomic.
class KvCache {
 public:
  KvCache(std::size_t num_layers, std::size_t num_heads, std::size_t head_dim);

  KvCache(const KvCache&) = delete;
  KvCache& operator=(const KvCache&) = delete;

  [[nodiscard]] std::size_t num_layers() const noexcept { return num_layers_; }
  [[nodiscard]] std::size_t num_heads() const noexcept { return num_heads_; }
  [[nodiscard]] std::size_t head_dim() const noexcept { return head_dim_; }

  /// Appends one block of rows to (layer, head); returns the new token count.
  std::size_t commit_block(std::size_t layer, std::size_t head, const Tensor2D& keys,
                           const Tensor2D& values);

  KvSlice read_range(std::size_t layer, std::size_t head, std::size_t from, std::size_t to) const;
  KvSlice peek_range(std::size_t layer, std::size_t head, std::size_t from, std::size_t to) const;

  [[nodiscard]] std::size_t committed_tokens(std::size_t layer, std::size_t head) const;
  /// Token count committed across every (layer, head) stream.
  [[nodiscard]] std::size_t sequence_length() const;
  [[nodiscard]] const std::vector<std::size_t>& block_boundaries(std::size_t layer,
                                                                 std::size_t head) const;

  [[nodiscard]] AccessCounters snapshot_counters() const noexcept;

 private:
  struct Stream {
    Tensor2D keys;
    Tensor2D values;
    std::vector<std::size_t> boundaries;
  };

  std::size_t index(std::size_t layer, std::size_t head) const;
  const Stream& stream(std::size_t layer, std::size_t head) const;
  void check_range(const Stream& s, std::size_t from, std::size_t to) const;

  std::size_t num_layers_;
  std::size_t num_heads_;
  std::size_t head_dim_;
  std::vector<Stream> streams_;

  mutable std::atomic<std::uint64_t> key_rows_read_{0};
  mutable std::atomic<std::uint64_t> value_rows_read_{0};
  std::atomic<std::uint64_t> rows_appended_{0};
  std::atomic<std::uint64_t> bytes_resident_{0};
};

}  // namespace flashblock
