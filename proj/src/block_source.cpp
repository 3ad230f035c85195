#include "flashblock/block_source.hpp"

#include <algorithm>
#include <string>

namespace flashblock {

BlockCausalSource::BlockCausalSource(const KvCache& kv, std::size_t layer, std::size_t head,
                                     std::size_t context_len, const Tensor2D& block_keys,
                                     const Tensor2D& block_values)
    : kv_(kv),
      layer_(layer),
      head_(head),
      context_len_(context_len),
      block_keys_(block_keys),
      block_values_(block_values) {
  if (block_keys.rows() != block_values.rows()) {
    throw ShapeError("block key/value row count mismatch");
  }
  if (context_len > kv.committed_tokens(layer, head)) {
    throw BoundsError("context length " + std::to_string(context_len) +
                      " exceeds committed tokens");
  }
}

KvTile<double> BlockCausalSource::fetch(std::size_t begin, std::size_t end) {
  if (begin > end || end > length()) {
    throw BoundsError("fetch [" + std::to_string(begin) + ", " + std::to_string(end) +
                      ") outside key stream of " + std::to_string(length()));
  }
  KvTile<double> tile{Tensor2D(0, block_keys_.cols()), Tensor2D(0, block_keys_.cols())};
  if (begin < context_len_) {
    auto slice = kv_.read_range(layer_, head_, begin, std::min(end, context_len_));
    tile.keys = std::move(slice.keys);
    tile.values = std::move(slice.values);
  }
  if (end > context_len_) {
    const std::size_t lb = std::max(begin, context_len_) - context_len_;
    const std::size_t le = end - context_len_;
    tile.keys.append_rows(block_keys_.slice_rows(lb, le));
    tile.values.append_rows(block_values_.slice_rows(lb, le));
    local_rows_read_ += le - lb;
  }
  return tile;
}

}  // namespace flashblock
