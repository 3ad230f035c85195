#pragma once

// Per-block sparse attention with residual reuse.
//
// At the first step of a block a full pass over every key picks the
// highest-mass key blocks of the committed context (the block's own keys are
// always attended). The same pass also yields the partial over the keys the
// mask leaves out; that residual is cached and merged back at every later
// step of the block, while attention over the selected keys is recomputed.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "flashblock/attention.hpp"
#include "flashblock/model.hpp"
#include "flashblock/sim.hpp"

namespace flashblock {

struct SparseMask {
  std::size_t block_id = 0;
  double density = 1.0;
  std::size_t key_block_size = 16;
  /// Committed context length the mask was built against.
  std::size_t context_len = 0;
  std::size_t num_layers = 1;
  std::size_t num_heads = 1;
  /// Sorted selected key-block indices over the context, per (layer, head).
  std::vector<std::vector<std::size_t>> selected;

  SparseMask() = default;
  SparseMask(std::size_t block_id, double density, std::size_t key_block_size,
             std::size_t context_len, std::size_t num_layers, std::size_t num_heads);

  [[nodiscard]] std::size_t context_blocks() const noexcept {
    return (context_len + key_block_size - 1) / key_block_size;
  }
  [[nodiscard]] const std::vector<std::size_t>& selection(std::size_t layer,
                                                          std::size_t head) const;
  void set_selection(std::size_t layer, std::size_t head, std::vector<std::size_t> blocks);
  [[nodiscard]] bool is_selected(std::size_t layer, std::size_t head, std::size_t key) const;
  [[nodiscard]] std::size_t selected_context_keys(std::size_t layer, std::size_t head) const;
  /// Selected context keys over all context keys (1 for an empty context).
  [[nodiscard]] double realized_density(std::size_t layer, std::size_t head) const;
};

/// Top-k context key blocks by aggregate dense attention probability mass,
/// k = ceil(density * context_len / key_block_size) clamped to [1, #blocks].
/// `keys` holds the context rows followed by the block's own rows.
std::vector<std::size_t> select_key_blocks(const Tensor2D& q, const Tensor2D& keys,
                                           std::size_t context_len, double density,
                                           std::size_t key_block_size, double scale);

/// Single-head convenience wrapper around select_key_blocks.
SparseMask build_sparse_mask(std::size_t block_id, const Tensor2D& q, const Tensor2D& keys,
                             std::size_t context_len, double density,
                             std::size_t key_block_size, double scale);

struct SparseResult {
  Tensor2D output;
  AttnPartial<double> selected;
  AttnPartial<double> residual;
};

namespace detail {
void check_mask(const SparseMask& mask, std::size_t block_id, std::size_t source_len,
                std::size_t block_queries);
}

/// With no residual (first step of a block): one pass over all keys, routed
/// by mask membership into selected and residual partials; the output is
/// exact. With a cached residual: only selected keys and the block's own keys
/// are fetched, then merged with the residual.
template <KeyValueSource<double> Source>
SparseResult sparse_attention_with_residual(const Tensor2D& q, const SparseMask& mask,
                                            std::size_t layer, std::size_t head,
                                            std::size_t block_id, Source& source,
                                            const AttnPartial<double>* residual, double scale,
                                            const StreamOptions& opts = {}) {
  const std::size_t ctx = mask.context_len;
  const std::size_t len = source.length();
  detail::check_mask(mask, block_id, len, q.rows());
  const std::size_t tile = std::max<std::size_t>(opts.tile_size, 1);
  const std::size_t kb = mask.key_block_size;
  const auto& chosen = mask.selection(layer, head);

  OnlineSoftmax<double> sel(q, scale, opts.score_offset);
  SparseResult result;
  if (residual == nullptr) {
    OnlineSoftmax<double> res(q, scale, opts.score_offset);
    for (std::size_t b = 0; b < len; b += tile) {
      const std::size_t e = std::min(b + tile, len);
      auto t = source.fetch(b, e);
      std::size_t run = 0;
      while (run < e - b) {
        const std::size_t key = b + run;
        const bool in = key >= ctx || mask.is_selected(layer, head, key);
        std::size_t stop = run + 1;
        while (stop < e - b) {
          const std::size_t k2 = b + stop;
          if ((k2 >= ctx || mask.is_selected(layer, head, k2)) != in) break;
          ++stop;
        }
        (in ? sel : res).absorb(t.keys, t.values, run, stop);
        run = stop;
      }
    }
    result.residual = res.finalize();
  } else {
    if (residual->queries() != q.rows() || residual->dim() != q.cols()) {
      throw ShapeError("cached residual does not match the block's queries");
    }
    for (std::size_t blk : chosen) {
      const std::size_t e = std::min((blk + 1) * kb, ctx);
      for (std::size_t b = blk * kb; b < e; b += tile) sel.absorb(source.fetch(b, std::min(b + tile, e)));
    }
    for (std::size_t b = ctx; b < len; b += tile) sel.absorb(source.fetch(b, std::min(b + tile, len)));
    result.residual = *residual;
  }
  result.selected = sel.finalize();
  result.output = merge_partials(result.residual, result.selected);
  return result;
}

/// Standard sparse attention: softmax renormalized over the selected keys
/// and the block's own keys, nothing added back.
template <KeyValueSource<double> Source>
Tensor2D sparse_attention_only(const Tensor2D& q, const SparseMask& mask, std::size_t layer,
                               std::size_t head, std::size_t block_id, Source& source,
                               double scale, const StreamOptions& opts = {}) {
  auto empty = AttnPartial<double>::empty(q.rows(), q.cols());
  return sparse_attention_with_residual(q, mask, layer, head, block_id, source, &empty, scale,
                                        opts)
      .output;
}

struct SparseGapConfig {
  std::size_t layer = 0;
  std::size_t prompt_len = 256;
  std::size_t block_size = 8;
  std::size_t key_block_size = 16;
  std::size_t num_seeds = 1;
  std::uint64_t first_seed = 0;
  SimOptions sim;
};

struct SparseGapRow {
  double density = 1.0;
  double l1_sparse_only = 0.0;
  double l1_with_residual = 0.0;
  std::uint64_t seed = 0;
};

/// For every seed, denoises one block on the dense path; at `layer` every
/// head builds a mask per density on the first step and, on every later
/// step, measures the mean |output - dense| of sparse-only and
/// sparse-plus-residual attention. Rows are ordered by density, then seed.
std::vector<SparseGapRow> measure_sparse_gap(const SyntheticModel& model,
                                             std::span<const double> densities,
                                             const SparseGapConfig& config);

/// `density,l1_sparse_only,l1_with_residual,seed`
void write_gap_csv(std::ostream& out, std::span<const SparseGapRow> rows);

}  // namespace flashblock
