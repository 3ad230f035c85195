#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "flashblock/model.hpp"
#include "flashblock/sim.hpp"
#include "flashblock/tensor.hpp"

namespace flashblock {

/// B x B cosine similarities between two steps' per-token outputs:
/// entry (i, j) compares token j at step s with token i at step s+1, so the
/// diagonal tracks each token across the step.
Tensor2D pairwise_step_similarity(const Tensor2D& step_s, const Tensor2D& step_s1);

/// Mean of the diagonal of pairwise_step_similarity, without the off-diagonal work.
double mean_diagonal_similarity(const Tensor2D& step_s, const Tensor2D& step_s1);

struct StabilityConfig {
  std::size_t prompt_len = 64;
  std::size_t block_size = 8;
  /// Denoising steps to run in the block (the step budget).
  std::size_t steps = 8;
  std::uint64_t seed = 0;
  /// Uses this prompt instead of a seeded random one when set.
  std::optional<std::vector<TokenId>> prompt;
};

struct StabilityRecord {
  std::size_t layer;
  std::size_t head;
  /// Pair (step, step + 1).
  std::size_t step;
  double mean_diag_out;
  double mean_diag_in;
};

struct SimilarityCell {
  std::size_t layer;
  std::size_t head;
  std::size_t step;
  std::size_t i;
  std::size_t j;
  double sim;
};

struct StabilityStudy {
  std::vector<StabilityRecord> summary;
  std::vector<SimilarityCell> full;

  /// Share of (layer, head) whose step-averaged external similarity exceeds
  /// the internal one. NaN when there are no step pairs.
  [[nodiscard]] double fraction_external_more_stable() const;
};

/// Denoises one block under always-recompute and compares the normalized
/// block-external and block-internal partials across adjacent steps.
StabilityStudy stability_study(const SyntheticModel& model, const StabilityConfig& config);

/// `layer,head,step,i,j,sim`
void write_similarity_full_csv(std::ostream& out, std::span<const SimilarityCell> cells);
/// `layer,head,step,mean_diag_out,mean_diag_in`
void write_similarity_summary_csv(std::ostream& out, std::span<const StabilityRecord> records);

}  // namespace flashblock
