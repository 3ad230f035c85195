#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string_view>
#include <vector>

#include "flashblock/attention.hpp"
#include "flashblock/kv_cache.hpp"
#include "flashblock/model.hpp"
#include "flashblock/reuse_policy.hpp"

namespace flashblock {

struct SimOptions {
  std::size_t block_size = 8;
  /// Step budget per block; 0 means block_size. The last budgeted step
  /// unmasks every remaining position.
  std::size_t steps_per_block = 0;
  /// Positions unmasked per step (highest confidence first).
  std::size_t unmask_per_step = 1;
  /// When positive, unmask every masked position whose confidence reaches
  /// this value (at least one per step) instead of a fixed count.
  double confidence_threshold = 0.0;
  std::size_t tile_size = 64;

  void validate() const;
  [[nodiscard]] std::size_t step_budget() const noexcept {
    return steps_per_block == 0 ? block_size : steps_per_block;
  }
};

struct BlockState {
  std::size_t block_id = 0;
  /// Tokens committed before this block; also the position of its first token.
  std::size_t context_len = 0;
  std::vector<TokenId> token_ids;
  /// Ids the previous forward pass saw (equal to token_ids before step 0).
  std::vector<TokenId> previous_ids;
  std::size_t step_index = 0;

  [[nodiscard]] std::vector<std::size_t> masked_positions(TokenId mask) const;
  [[nodiscard]] bool finished(TokenId mask) const { return masked_positions(mask).empty(); }
};

enum class StepDecision { FirstVisit, Reuse, Recompute };
std::string_view to_string(StepDecision d);

/// One denoising step. Work figures are means over the model's
/// (layer, head) pairs, so they read as "per attention head".
struct StepTrace {
  std::size_t block_id = 0;
  std::size_t step_index = 0;
  StepDecision decision = StepDecision::FirstVisit;
  std::size_t updated_tokens = 0;
  /// Keys entering the softmax per query row.
  double keys_attended = 0.0;
  /// Key rows read: KV-cache rows plus block-local rows.
  double kv_rows_read = 0.0;
  /// The KV-cache (block-external) share of kv_rows_read.
  double external_rows_read = 0.0;
  std::size_t cache_hits = 0;
  std::uint64_t attention_flops = 0;
  double output_checksum = 0.0;
  /// Largest |output - dense oracle| over all heads; verify mode only.
  std::optional<double> linf_gap;
};

/// What one head saw during a step. `external` is the freshly streamed
/// partial on recompute steps and the cached one on reuse steps.
struct HeadObservation {
  std::size_t layer;
  std::size_t head;
  std::size_t block_id;
  std::size_t step_index;
  std::size_t context_len;
  bool reused;
  const Tensor2D& q;
  const Tensor2D& block_keys;
  const Tensor2D& block_values;
  const AttnPartial<double>& external;
  const AttnPartial<double>& internal;
  const Tensor2D& output;
  const KvCache& kv;
};

using HeadObserver = std::function<void(const HeadObservation&)>;

struct StepHooks {
  const HeadGateTable* gates = nullptr;
  const HeadObserver* observer = nullptr;
};

struct StepOutcome {
  BlockState state;
  StepTrace trace;
};

/// Fresh all-mask block positioned after the committed context.
BlockState start_block(const SyntheticModel& model, std::size_t block_id,
                       std::size_t context_len, std::size_t block_size);

/// Runs one forward pass over the current block, choosing reuse or recompute
/// per (layer, head), then unmasks the most confident positions.
StepOutcome denoise_step(const SyntheticModel& model, const BlockState& state, KvCache& kv,
                         ExternalAttnCache<double>& ext_cache, const ReuseConfig& policy,
                         const SimOptions& options, bool verify, const StepHooks& hooks = {});

/// Final full-attention pass over the finished block; appends its K/V to the
/// cache and drops the block's external-attention entries.
void commit_block(const SyntheticModel& model, std::span<const TokenId> ids,
                  std::size_t context_len, KvCache& kv, ExternalAttnCache<double>& ext_cache,
                  std::size_t tile_size = 64);

/// Commits the prompt as consecutive blocks of `block_size` (last may be short).
void prefill(const SyntheticModel& model, std::span<const TokenId> prompt, KvCache& kv,
             ExternalAttnCache<double>& ext_cache, std::size_t block_size,
             std::size_t tile_size = 64);

/// Deterministic prompt of non-mask tokens.
std::vector<TokenId> make_prompt(const SyntheticModel& model, std::size_t length,
                                 std::uint64_t seed);

struct RunConfig {
  std::size_t prompt_len = 32;
  std::size_t num_blocks = 2;
  SimOptions sim;
};

struct SequenceResult {
  std::vector<StepTrace> traces;
  /// Prompt followed by every generated block.
  std::vector<TokenId> token_ids;
  AccessCounters counters;
};

SequenceResult run_sequence(const SyntheticModel& model, const RunConfig& config,
                            const ReuseConfig& policy, bool verify, std::uint64_t seed,
                            const StepHooks& hooks = {});

SequenceResult run_sequence(const SyntheticModel& model, std::span<const TokenId> prompt,
                            const RunConfig& config, const ReuseConfig& policy, bool verify,
                            const StepHooks& hooks = {});

struct ProbeConfig {
  std::size_t num_seeds = 16;
  std::uint64_t first_seed = 0;
  RunConfig run;
};

struct QualityReport {
  std::size_t sequences = 0;
  std::size_t exact_matches = 0;
  double match_rate = 0.0;
  /// Mean over policy_b's steps of the per-step attention L-inf gap.
  double mean_linf_gap = 0.0;
  double max_linf_gap = 0.0;
  /// Histogram of updated-token counts M over policy_b's non-first steps.
  std::map<std::size_t, std::size_t> m_histogram;
  std::vector<bool> per_seed_match;
};

/// Paired runs of two policies over the same prompts.
QualityReport quality_probe(const SyntheticModel& model, const ReuseConfig& policy_a,
                            const ReuseConfig& policy_b, const ProbeConfig& config,
                            const HeadGateTable* gates = nullptr);

/// `block_id,step,decision,M,keys_attended,kv_rows_read,checksum,linf_gap`
void write_trace_csv(std::ostream& out, std::span<const StepTrace> traces);

}  // namespace flashblock
