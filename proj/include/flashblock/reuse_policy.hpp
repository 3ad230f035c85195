#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace flashblock {

using TokenId = std::int32_t;

enum class ReuseMode { TokenThreshold, HeadGated, AlwaysRecompute, AlwaysReuse };

std::string_view to_string(ReuseMode mode);
ReuseMode parse_reuse_mode(std::string_view text);

struct ReuseConfig {
  /// Reuse only while fewer than `tau` block tokens changed at this step.
  std::size_t tau = 2;
  /// Heads whose calibrated cross-step similarity exceeds this may reuse.
  double gamma = 0.9;
  ReuseMode mode = ReuseMode::TokenThreshold;

  /// Throws ConfigError unless tau >= 1 and 0 <= gamma <= 1.
  void validate() const;
};

enum class ReuseDecision { Reuse, Recompute };

/// Pure reuse/recompute rule. Without a valid cache entry (or on the first
/// visit to a block) every mode recomputes. In head-gated mode the tau test
/// still applies on top of the head gate.
ReuseDecision decide(const ReuseConfig& config, bool cache_valid, bool first_visit,
                     std::size_t updated_tokens, bool head_gate = true);

/// Number of positions whose token id differs between two steps.
std::size_t count_updated_tokens(std::span<const TokenId> previous,
                                 std::span<const TokenId> current);

struct HeadGate {
  std::size_t layer = 0;
  std::size_t head = 0;
  /// Mean adjacent-step cosine similarity of the block-external output.
  double similarity = 0.0;
  /// Worst adjacent-step similarity seen during calibration.
  double min_similarity = 0.0;
  bool enabled = false;

  friend bool operator==(const HeadGate&, const HeadGate&) = default;
};

/// Offline per-(layer, head) reuse gates; enabled == (similarity > gamma).
struct HeadGateTable {
  double gamma = 0.9;
  std::vector<HeadGate> heads;

  /// Heads absent from the table are treated as disabled.
  [[nodiscard]] bool enabled(std::size_t layer, std::size_t head) const;

  [[nodiscard]] nlohmann::json to_json() const;
  static HeadGateTable from_json(const nlohmann::json& doc);

  friend bool operator==(const HeadGateTable&, const HeadGateTable&) = default;
};

class SyntheticModel;

struct CalibrationOptions {
  std::size_t samples = 4;
  double gamma = 0.9;
  std::size_t prompt_len = 64;
  std::size_t block_size = 8;
  std::uint64_t seed = 0;
};

/// Runs `samples` always-recompute rollouts of one block and thresholds each
/// head's mean adjacent-step similarity of the block-external output at gamma.
HeadGateTable calibrate_head_gates(const SyntheticModel& model, const CalibrationOptions& options);

}  // namespace flashblock
