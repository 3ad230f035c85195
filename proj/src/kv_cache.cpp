#include "flashblock/kv_cache.hpp"

#include <algorithm>
#include <string>

namespace flashblock {

KvCache::KvCache(std::size_t num_layers, std::size_t num_heads, std::size_t head_dim)
    : num_layers_(num_layers), num_heads_(num_heads), head_dim_(head_dim) {
  streams_.resize(num_layers * num_heads);
  for (auto& s : streams_) {
    s.keys = Tensor2D(0, head_dim);
    s.values = Tensor2D(0, head_dim);
  }
}

std::size_t KvCache::index(std::size_t layer, std::size_t head) const {
  if (layer >= num_layers_ || head >= num_heads_) {
    throw BoundsError("kv cache has no stream for layer " + std::to_string(layer) + ", head " +
                      std::to_string(head));
  }
  return layer * num_heads_ + head;
}

const KvCache::Stream& KvCache::stream(std::size_t layer, std::size_t head) const {
  return streams_[index(layer, head)];
}

std::size_t KvCache::commit_block(std::size_t layer, std::size_t head, const Tensor2D& keys,
                                  const Tensor2D& values) {
  if (keys.rows() != values.rows()) {
    throw ShapeError("commit_block: " + std::to_string(keys.rows()) + " key rows vs " +
                     std::to_string(values.rows()) + " value rows");
  }
  if (keys.cols() != head_dim_ || values.cols() != head_dim_) {
    throw ShapeError("commit_block: row width must equal head_dim " + std::to_string(head_dim_));
  }
  if (keys.rows() == 0) throw ShapeError("commit_block: empty block");
  auto& s = streams_[index(layer, head)];
  s.keys.append_rows(keys);
  s.values.append_rows(values);
  s.boundaries.push_back(s.keys.rows());
  rows_appended_ += keys.rows();
  bytes_resident_ += 2 * keys.rows() * head_dim_ * sizeof(double);
  return s.keys.rows();
}

void KvCache::check_range(const Stream& s, std::size_t from, std::size_t to) const {
  if (from > to || to > s.keys.rows()) {
    throw BoundsError("kv range [" + std::to_string(from) + ", " + std::to_string(to) +
                      ") outside committed " + std::to_string(s.keys.rows()) + " tokens");
  }
}

KvSlice KvCache::read_range(std::size_t layer, std::size_t head, std::size_t from,
                            std::size_t to) const {
  const auto& s = stream(layer, head);
  check_range(s, from, to);
  key_rows_read_ += to - from;
  value_rows_read_ += to - from;
  return {s.keys.slice_rows(from, to), s.values.slice_rows(from, to)};
}

KvSlice KvCache::peek_range(std::size_t layer, std::size_t head, std::size_t from,
                            std::size_t to) const {
  const auto& s = stream(layer, head);
  check_range(s, from, to);
  return {s.keys.slice_rows(from, to), s.values.slice_rows(from, to)};
}

std::size_t KvCache::committed_tokens(std::size_t layer, std::size_t head) const {
  return stream(layer, head).keys.rows();
}

std::size_t KvCache::sequence_length() const {
  std::size_t n = streams_.empty() ? 0 : streams_.front().keys.rows();
  for (const auto& s : streams_) n = std::min(n, s.keys.rows());
  return n;
}

const std::vector<std::size_t>& KvCache::block_boundaries(std::size_t layer,
                                                          std::size_t head) const {
  return stream(layer, head).boundaries;
}

AccessCounters KvCache::snapshot_counters() const noexcept {
  return {key_rows_read_.load(), value_rows_read_.load(), rows_appended_.load(),
          bytes_resident_.load()};
}

}  // namespace flashblock
