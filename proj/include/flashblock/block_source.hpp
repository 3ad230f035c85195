#pragma once

#include <cstddef>

#include "flashblock/attention.hpp"
#include "flashblock/kv_cache.hpp"

namespace flashblock {

/// Key stream for one (layer, head) of the block being denoised: committed
/// context rows [0, context_len) come from the KV cache (counted reads), the
/// block's own rows follow from the step-local buffers.
class BlockCausalSource {
 public:
  BlockCausalSource(const KvCache& kv, std::size_t layer, std::size_t head,
                    std::size_t context_len, const Tensor2D& block_keys,
                    const Tensor2D& block_values);

  [[nodiscard]] std::size_t length() const noexcept { return context_len_ + block_keys_.rows(); }
  [[nodiscard]] std::size_t context_len() const noexcept { return context_len_; }

  KvTile<double> fetch(std::size_t begin, std::size_t end);

  /// Rows served from the step-local block buffers so far.
  [[nodiscard]] std::size_t local_rows_read() const noexcept { return local_rows_read_; }

 private:
  const KvCache& kv_;
  std::size_t layer_;
  std::size_t head_;
  std::size_t context_len_;
  const Tensor2D& block_keys_;
  const Tensor2D& block_values_;
  std::size_t local_rows_read_ = 0;
};

static_assert(KeyValueSource<BlockCausalSource, double>);

}  // namespace flashblock
