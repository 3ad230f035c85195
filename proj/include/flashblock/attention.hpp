#pragma once

// Block-causal attention split into block-external and block-internal parts.
//
// Every path here produces an AttnPartial: the softmax-normalized output over
// some key subset together with the per-query log of that subset's partition
// sum. Two partials over disjoint key sets recombine exactly:
//
//   m   = max(L_a, L_b)
//   out = (e^(L_a - m) A_a + e^(L_b - m) A_b) / (e^(L_a - m) + e^(L_b - m))
//
// An empty key set is encoded as L = -inf with zero output rows, which makes
// it the identity of the combination.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "flashblock/linalg.hpp"
#include "flashblock/tensor.hpp"

namespace flashblock {

template <typename T>
struct AttnPartial {
  Tensor<T> out;
  std::vector<T> lognorm;

  static AttnPartial empty(std::size_t queries, std::size_t dim) {
    return {Tensor<T>(queries, dim), std::vector<T>(queries, -std::numeric_limits<T>::infinity())};
  }

  [[nodiscard]] std::size_t queries() const noexcept { return lognorm.size(); }
  [[nodiscard]] std::size_t dim() const noexcept { return out.cols(); }
  [[nodiscard]] bool row_empty(std::size_t i) const noexcept {
    return lognorm[i] == -std::numeric_limits<T>::infinity();
  }
  [[nodiscard]] bool all_empty() const noexcept {
    for (std::size_t i = 0; i < queries(); ++i) {
      if (!row_empty(i)) return false;
    }
    return true;
  }
  /// Bytes held by the output rows plus one log-normalizer per row.
  [[nodiscard]] std::size_t resident_bytes() const noexcept {
    return (out.size() + lognorm.size()) * sizeof(T);
  }
};

template <typename T>
struct KvTile {
  Tensor<T> keys;
  Tensor<T> values;
};

/// Anything that can hand out key/value rows [begin, end) of a logical key stream.
template <typename S, typename T>
concept KeyValueSource = requires(S& s, std::size_t a, std::size_t b) {
  { s.length() } -> std::convertible_to<std::size_t>;
  { s.fetch(a, b) } -> std::same_as<KvTile<T>>;
};

template <typename T>
class TensorKvSource {
 public:
  TensorKvSource(const Tensor<T>& keys, const Tensor<T>& values) : keys_(keys), values_(values) {
    if (keys.rows() != values.rows()) throw ShapeError("key/value row count mismatch");
  }

  [[nodiscard]] std::size_t length() const noexcept { return keys_.rows(); }

  KvTile<T> fetch(std::size_t begin, std::size_t end) {
    rows_fetched_ += end - begin;
    return {keys_.slice_rows(begin, end), values_.slice_rows(begin, end)};
  }

  [[nodiscard]] std::size_t rows_fetched() const noexcept { return rows_fetched_; }

 private:
  const Tensor<T>& keys_;
  const Tensor<T>& values_;
  std::size_t rows_fetched_ = 0;
};

struct StreamOptions {
  std::size_t tile_size = 64;
  /// Constant added to every attention score. Zero in normal use; the
  /// shift-stability checks use it to push scores into overflow territory.
  double score_offset = 0.0;
};

/// Running (max, sum, weighted-sum) accumulators for every query row.
template <typename T>
class OnlineSoftmax {
 public:
  OnlineSoftmax(const Tensor<T>& q, T scale, T score_offset = T{0})
      : q_(q),
        scale_(scale),
        offset_(score_offset),
        max_(q.rows(), -std::numeric_limits<T>::infinity()),
        sum_(q.rows(), T{0}),
        acc_(q.rows(), q.cols()) {}

  /// Folds key/value rows [begin, end) of a tile into the accumulators.
  void absorb(const Tensor<T>& keys, const Tensor<T>& values, std::size_t begin, std::size_t end) {
    if (begin >= end) return;
    if (keys.cols() != q_.cols() || values.cols() != q_.cols() || keys.rows() != values.rows()) {
      throw ShapeError("attention tile shape does not match the queries");
    }
    scores_.resize(end - begin);
    for (std::size_t i = 0; i < q_.rows(); ++i) {
      auto qi = q_.row(i);
      T tile_max = -std::numeric_limits<T>::infinity();
      for (std::size_t r = begin; r < end; ++r) {
        const T s = dot(qi, keys.row(r)) * scale_ + offset_;
        scores_[r - begin] = s;
        tile_max = std::max(tile_max, s);
      }
      const T new_max = std::max(max_[i], tile_max);
      const T correction = max_[i] == -std::numeric_limits<T>::infinity()
                               ? T{0}
                               : std::exp(max_[i] - new_max);
      auto acc = acc_.row(i);
      T sum = sum_[i] * correction;
      for (auto& a : acc) a *= correction;
      for (std::size_t r = begin; r < end; ++r) {
        const T p = std::exp(scores_[r - begin] - new_max);
        sum += p;
        auto v = values.row(r);
        for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += p * v[c];
      }
      sum_[i] = sum;
      max_[i] = new_max;
    }
  }

  void absorb(const KvTile<T>& tile) { absorb(tile.keys, tile.values, 0, tile.keys.rows()); }

  [[nodiscard]] AttnPartial<T> finalize() const {
    auto part = AttnPartial<T>::empty(q_.rows(), q_.cols());
    for (std::size_t i = 0; i < q_.rows(); ++i) {
      if (sum_[i] == T{0}) continue;
      const T inv = T{1} / sum_[i];
      auto src = acc_.row(i);
      auto dst = part.out.row(i);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] = src[c] * inv;
      part.lognorm[i] = max_[i] + std::log(sum_[i]);
    }
    return part;
  }

  void reset() {
    std::fill(max_.begin(), max_.end(), -std::numeric_limits<T>::infinity());
    std::fill(sum_.begin(), sum_.end(), T{0});
    std::fill(acc_.data().begin(), acc_.data().end(), T{0});
  }

 private:
  const Tensor<T>& q_;
  T scale_;
  T offset_;
  std::vector<T> max_;
  std::vector<T> sum_;
  Tensor<T> acc_;
  std::vector<T> scores_;
};

template <typename T>
struct StreamedPartials {
  AttnPartial<T> external;
  AttnPartial<T> internal;
};

/// One tiled pass over the key stream. Keys before `boundary` feed the
/// block-external partial, which is finalized the moment the stream crosses
/// the boundary; the accumulators then restart for the block-internal keys.
template <typename T, KeyValueSource<T> Source>
StreamedPartials<T> attention_streamed(const Tensor<T>& q, Source& source, T scale,
                                       std::size_t boundary, const StreamOptions& opts = {}) {
  const std::size_t len = source.length();
  if (boundary > len) {
    throw BoundsError("stream boundary " + std::to_string(boundary) + " beyond " +
                      std::to_string(len) + " keys");
  }
  const std::size_t tile = std::max<std::size_t>(opts.tile_size, 1);
  OnlineSoftmax<T> acc(q, scale, static_cast<T>(opts.score_offset));
  for (std::size_t b = 0; b < boundary; b += tile) {
    acc.absorb(source.fetch(b, std::min(b + tile, boundary)));
  }
  StreamedPartials<T> result{acc.finalize(), {}};
  acc.reset();
  for (std::size_t b = boundary; b < len; b += tile) {
    acc.absorb(source.fetch(b, std::min(b + tile, len)));
  }
  result.internal = acc.finalize();
  return result;
}

/// Attention partial over a single in-memory key set.
template <typename T>
AttnPartial<T> attention_partial(const Tensor<T>& q, const Tensor<T>& keys,
                                 const Tensor<T>& values, T scale,
                                 const StreamOptions& opts = {}) {
  TensorKvSource<T> source(keys, values);
  auto parts = attention_streamed(q, source, scale, 0, opts);
  return std::move(parts.internal);
}

/// Log-space combination of two partials over disjoint key sets. Rows that
/// are empty on both sides stay empty.
template <typename T>
AttnPartial<T> combine_partials(const AttnPartial<T>& a, const AttnPartial<T>& b) {
  if (a.queries() != b.queries() || a.dim() != b.dim() || a.out.rows() != a.queries() ||
      b.out.rows() != b.queries()) {
    throw ShapeError("combine_partials: partial shapes differ");
  }
  auto merged = AttnPartial<T>::empty(a.queries(), a.dim());
  for (std::size_t i = 0; i < a.queries(); ++i) {
    const bool a_empty = a.row_empty(i);
    const bool b_empty = b.row_empty(i);
    auto dst = merged.out.row(i);
    if (a_empty && b_empty) continue;
    if (a_empty || b_empty) {
      const auto& src = a_empty ? b : a;
      std::copy(src.out.row(i).begin(), src.out.row(i).end(), dst.begin());
      merged.lognorm[i] = src.lognorm[i];
      continue;
    }
    const T m = std::max(a.lognorm[i], b.lognorm[i]);
    const T wa = std::exp(a.lognorm[i] - m);
    const T wb = std::exp(b.lognorm[i] - m);
    const T denom = wa + wb;
    auto ra = a.out.row(i);
    auto rb = b.out.row(i);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] = (wa * ra[c] + wb * rb[c]) / denom;
    merged.lognorm[i] = m + std::log(denom);
  }
  return merged;
}

/// Full attention output from its block-external and block-internal parts.
/// Throws DegenerateInputError if some query row saw no keys at all.
template <typename T>
Tensor<T> merge_partials(const AttnPartial<T>& external, const AttnPartial<T>& internal) {
  if (external.queries() != internal.queries() || external.dim() != internal.dim()) {
    throw ShapeError("merge_partials: external and internal partial shapes differ");
  }
  for (std::size_t i = 0; i < external.queries(); ++i) {
    if (external.row_empty(i) && internal.row_empty(i)) {
      throw DegenerateInputError("merge_partials: query row " + std::to_string(i) +
                                 " has no contributing keys");
    }
  }
  return combine_partials(external, internal).out;
}

/// Exact softmax attention in 64-bit with max subtraction. This is the
/// reference every cached or sparse path is checked against.
Tensor2D attention_dense(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v, double scale,
                         double score_offset = 0.0);

inline double default_scale(std::size_t head_dim) {
  return 1.0 / std::sqrt(static_cast<double>(head_dim));
}

template <typename T>
struct CacheEntry {
  AttnPartial<T> external;
  std::size_t block_id = 0;
  std::size_t step_created = 0;
  bool valid = false;
};

/// Block-external partials for the block in progress, one slot per
/// (layer, head). Slots are independent, so distinct heads may be updated
/// concurrently; a single slot must not be.
template <typename T>
class ExternalAttnCache {
 public:
  ExternalAttnCache(std::size_t num_layers, std::size_t num_heads)
      : num_layers_(num_layers), num_heads_(num_heads), slots_(num_layers * num_heads) {}

  void store(std::size_t layer, std::size_t head, AttnPartial<T> external, std::size_t block_id,
             std::size_t step) {
    auto& slot = slots_[index(layer, head)];
    if (slot && slot->valid && slot->block_id == block_id &&
        slot->external.queries() != external.queries()) {
      throw ShapeError("external cache: query count changed within a block");
    }
    slot = CacheEntry<T>{std::move(external), block_id, step, true};
  }

  /// Valid entry for (layer, head), or nullptr.
  [[nodiscard]] const CacheEntry<T>* lookup(std::size_t layer, std::size_t head) const {
    const auto& slot = slots_[index(layer, head)];
    return slot && slot->valid ? &*slot : nullptr;
  }

  [[nodiscard]] bool valid(std::size_t layer, std::size_t head) const {
    return lookup(layer, head) != nullptr;
  }

  /// Drops every entry; called when the current block commits.
  void invalidate_all() {
    for (auto& slot : slots_) slot.reset();
  }

  [[nodiscard]] std::size_t resident_bytes(std::size_t layer, std::size_t head) const {
    const auto* e = lookup(layer, head);
    return e ? e->external.resident_bytes() : 0;
  }

  [[nodiscard]] std::size_t resident_bytes() const {
    std::size_t total = 0;
    for (const auto& slot : slots_) {
      if (slot && slot->valid) total += slot->external.resident_bytes();
    }
    return total;
  }

  [[nodiscard]] std::size_t num_layers() const noexcept { return num_layers_; }
  [[nodiscard]] std::size_t num_heads() const noexcept { return num_heads_; }

 private:
  std::size_t index(std::size_t layer, std::size_t head) const {
    if (layer >= num_layers_ || head >= num_heads_) {
      throw BoundsError("external cache has no slot for layer " + std::to_string(layer) +
                        ", head " + std::to_string(head));
    }
    return layer * num_heads_ + head;
  }

  std::size_t num_layers_;
  std::size_t num_heads_;
  std::vector<std::optional<CacheEntry<T>>> slots_;
};

template <typename T>
struct ReuseResult {
  Tensor<T> output;
  AttnPartial<T> internal;
};

/// Recomputes block-internal attention only and composes it with the cached
/// block-external partial. Takes no KV-cache handle: the context is never read.
template <typename T>
ReuseResult<T> attention_with_reuse(const Tensor<T>& q, const CacheEntry<T>* entry,
                                    const Tensor<T>& internal_keys,
                                    const Tensor<T>& internal_values, T scale,
                                    const StreamOptions& opts = {}) {
  if (entry == nullptr || !entry->valid) {
    throw ReusePreconditionError("no valid block-external cache entry; recompute required");
  }
  if (entry->external.queries() != q.rows() || entry->external.dim() != q.cols()) {
    throw ReusePreconditionError("cached block-external partial has " +
                                 std::to_string(entry->external.queries()) +
                                 " query rows, block has " + std::to_string(q.rows()));
  }
  auto internal = attention_partial(q, internal_keys, internal_values, scale, opts);
  auto output = merge_partials(entry->external, internal);
  return {std::move(output), std::move(internal)};
}

}  // namespace flashblock
