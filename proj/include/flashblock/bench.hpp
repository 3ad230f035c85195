#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "flashblock/model.hpp"
#include "flashblock/reuse_policy.hpp"
#include "flashblock/sim.hpp"

namespace flashblock {

struct SweepConfig {
  std::vector<std::size_t> contexts{128, 512, 2048, 8192};
  std::vector<std::size_t> taus{2, 3, 4};
  /// Any of "reuse" (token threshold) and "dense" (always recompute).
  std::vector<std::string> policies{"reuse", "dense"};
  SimOptions sim;
  std::uint64_t seed = 0;
};

struct SweepRow {
  std::size_t context = 0;
  std::size_t tau = 0;
  std::string policy;
  std::size_t step = 0;
  StepDecision decision = StepDecision::FirstVisit;
  double keys_attended = 0.0;
  double kv_rows_read = 0.0;
  double external_rows_read = 0.0;
  std::int64_t wall_ns = 0;
};

/// For each context length, prefills a seeded prompt once, then denoises the
/// same block under every (tau, policy). Rows are sorted by context, tau,
/// policy (input order), step.
std::vector<SweepRow> sweep_context(const SyntheticModel& model, const SweepConfig& config);

/// `context,tau,policy,step,keys_attended,kv_rows_read,wall_ns`
void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
};

LinearFit fit_line(std::span<const double> x, std::span<const double> y);

struct GrowthSummary {
  std::size_t tau = 0;
  /// Fit of every dense step's kv_rows_read against context length.
  LinearFit dense_fit;
  /// Distinct kv_rows_read values seen on reuse-policy steps that reused.
  std::vector<double> reuse_step_reads;
  /// Total kv_rows_read over the block at the largest / smallest context.
  double dense_growth = 0.0;
  double reuse_growth = 0.0;
  /// reuse_growth / dense_growth.
  double growth_ratio = 0.0;
  /// Same comparison on increments: (work(max) - work(min)) reuse over dense.
  double increment_ratio = 0.0;
};

/// One summary per tau present in rows that have both policies.
std::vector<GrowthSummary> summarize_sweep(std::span<const SweepRow> rows);

}  // namespace flashblock
