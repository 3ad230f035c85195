#pragma once

// Randomized property checks shared by the CLI `verify` command and the
// acceptance suite. Each check is deterministic in its seed.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "flashblock/model.hpp"
#include "flashblock/reuse_policy.hpp"
#include "flashblock/sim.hpp"

namespace flashblock {

struct PropertyResult {
  std::string name;
  bool passed = false;
  /// Worst error observed (0 for counting properties).
  double max_error = 0.0;
  double tolerance = 0.0;
  std::size_t cases = 0;
  std::string note;
};

struct DecompositionConfig {
  std::size_t trials = 1000;
  std::uint64_t seed = 0;
  std::size_t min_layers = 1, max_layers = 4;
  std::size_t min_heads = 1, max_heads = 4;
  std::vector<std::size_t> dims{8, 16, 32};
  /// Key count is drawn log-uniformly from [min_keys, max_keys].
  std::size_t min_keys = 8, max_keys = 512;
  std::size_t max_queries = 4;
  double tol64 = 1e-10;
  double tol32 = 1e-3;
};

/// merge(streamed split at b) vs the dense oracle for every boundary b of
/// every head of every trial; one result per precision (64-bit, then 32-bit).
std::vector<PropertyResult> check_decomposition(const DecompositionConfig& config);

/// Three-way splits combined in every association order agree and match dense.
PropertyResult check_associativity(std::size_t trials, std::uint64_t seed, std::size_t dim,
                                   double tol = 1e-10);

enum class InputDistribution { StandardNormal, UniformUnit };

/// Adding `offset` to every score leaves the 32-bit merged output unchanged.
/// Inputs are drawn from `dist` (UniformUnit: uniform on [-1, 1]).
PropertyResult check_shift_stability(std::size_t trials, std::uint64_t seed, std::size_t dim,
                                     double offset = 80.0, double tol = 1e-6,
                                     InputDistribution dist = InputDistribution::StandardNormal);

/// On every Reuse step: zero KV-cache rows read and exactly B keys attended.
/// `cases` counts the Reuse steps seen, so callers can reject a vacuous pass.
PropertyResult check_no_kv_touch(const SyntheticModel& model, const RunConfig& run,
                                 const ReuseConfig& policy, std::size_t seeds,
                                 std::uint64_t first_seed);

/// Recompute-path steps match the dense oracle to `tol`; with tau = 1 the
/// final tokens also equal an always-recompute run.
PropertyResult check_baseline_equivalence(const SyntheticModel& model, const RunConfig& run,
                                          const ReuseConfig& policy, std::size_t seeds,
                                          std::uint64_t first_seed, double tol = 1e-9);

}  // namespace flashblock
