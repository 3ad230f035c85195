#include "flashblock/verify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "flashblock/attention.hpp"
#include "flashblock/errors.hpp"
#include "flashblock/parallel.hpp"
#include "flashblock/rng.hpp"

namespace flashblock {
namespace {

enum : std::uint64_t { kDecomp = 201, kAssoc, kShift };

Tensor2D normal_tensor(std::size_t rows, std::size_t cols, const CounterRng& rng,
                       std::uint64_t& counter) {
  Tensor2D t(rows, cols);
  for (auto& x : t.data()) x = rng.normal(counter++);
  return t;
}

std::size_t draw_between(const CounterRng& rng, std::uint64_t counter, std::size_t lo,
                         std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(counter, hi - lo + 1));
}

std::size_t log_uniform(const CounterRng& rng, std::uint64_t counter, std::size_t lo,
                        std::size_t hi) {
  const double a = std::log(static_cast<double>(lo));
  const double b = std::log(static_cast<double>(hi) + 1.0);
  const auto n = static_cast<std::size_t>(std::exp(a + (b - a) * rng.uniform(counter)));
  return std::clamp(n, lo, hi);
}

template <typename T>
Tensor2D streamed_merge(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, double scale,
                        std::size_t boundary, const StreamOptions& opts = {}) {
  TensorKvSource<T> src(k, v);
  auto parts = attention_streamed(q, src, static_cast<T>(scale), boundary, opts);
  return merge_partials(parts.external, parts.internal).template cast<double>();
}

PropertyResult finish(PropertyResult r) {
  r.passed = r.max_error < r.tolerance;
  return r;
}

}  // namespace

std::vector<PropertyResult> check_decomposition(const DecompositionConfig& config) {
  if (config.dims.empty() || config.min_keys == 0 || config.min_keys > config.max_keys ||
      config.min_layers == 0 || config.min_heads == 0 || config.max_queries == 0 ||
      config.min_layers > config.max_layers || config.min_heads > config.max_heads) {
    throw ConfigError("invalid decomposition check configuration");
  }
  std::vector<double> err64(config.trials, 0.0), err32(config.trials, 0.0);
  std::vector<std::size_t> cases(config.trials, 0);

  parallel_for(config.trials, [&](std::size_t t) {
    const CounterRng rng({config.seed, kDecomp, t});
    const std::size_t layers = draw_between(rng, 0, config.min_layers, config.max_layers);
    const std::size_t heads = draw_between(rng, 1, config.min_heads, config.max_heads);
    const std::size_t dim = config.dims[rng.below(2, config.dims.size())];
    const std::size_t keys = log_uniform(rng, 3, config.min_keys, config.max_keys);
    const std::size_t queries = draw_between(rng, 4, 1, config.max_queries);
    const double scale = default_scale(dim);
    std::uint64_t counter = 1000;
    for (std::size_t lh = 0; lh < layers * heads; ++lh) {
      const auto q = normal_tensor(queries, dim, rng, counter);
      const auto k = normal_tensor(keys, dim, rng, counter);
      const auto v = normal_tensor(keys, dim, rng, counter);
      const auto qf = q.cast<float>(), kf = k.cast<float>(), vf = v.cast<float>();
      const auto dense = attention_dense(q, k, v, scale);
      for (std::size_t b = 0; b <= keys; ++b) {
        err64[t] = std::max(err64[t], max_abs_diff(streamed_merge(q, k, v, scale, b), dense));
        err32[t] = std::max(err32[t], max_abs_diff(streamed_merge(qf, kf, vf, scale, b), dense));
        ++cases[t];
      }
    }
  });

  PropertyResult r64{"decomposition-64", false, 0.0, config.tol64, 0, ""};
  PropertyResult r32{"decomposition-32", false, 0.0, config.tol32, 0, ""};
  for (std::size_t t = 0; t < config.trials; ++t) {
    r64.max_error = std::max(r64.max_error, err64[t]);
    r32.max_error = std::max(r32.max_error, err32[t]);
    r64.cases += cases[t];
  }
  r32.cases = r64.cases;
  r64.note = r32.note = fmt::format("{} instances, every boundary", config.trials);
  return {finish(r64), finish(r32)};
}

PropertyResult check_associativity(std::size_t trials, std::uint64_t seed, std::size_t dim,
                                   double tol) {
  PropertyResult r{"merge-associativity", false, 0.0, tol, trials, ""};
  for (std::size_t t = 0; t < trials; ++t) {
    const CounterRng rng({seed, kAssoc, t});
    const std::size_t keys = draw_between(rng, 0, 3, 96);
    const std::size_t a = draw_between(rng, 1, 0, keys);
    const std::size_t b = draw_between(rng, 2, a, keys);
    std::uint64_t counter = 1000;
    const auto q = normal_tensor(4, dim, rng, counter);
    const auto k = normal_tensor(keys, dim, rng, counter);
    const auto v = normal_tensor(keys, dim, rng, counter);
    const double scale = default_scale(dim);
    auto seg = [&](std::size_t lo, std::size_t hi) {
      return attention_partial(q, k.slice_rows(lo, hi), v.slice_rows(lo, hi), scale);
    };
    const auto e1 = seg(0, a), e2 = seg(a, b), e3 = seg(b, keys);
    const auto left = combine_partials(combine_partials(e1, e2), e3).out;
    const auto right = combine_partials(e1, combine_partials(e2, e3)).out;
    const auto outer = combine_partials(combine_partials(e1, e3), e2).out;
    const auto dense = attention_dense(q, k, v, scale);
    r.max_error = std::max({r.max_error, max_abs_diff(left, right), max_abs_diff(left, outer),
                            max_abs_diff(left, dense)});
  }
  return finish(r);
}

PropertyResult check_shift_stability(std::size_t trials, std::uint64_t seed, std::size_t dim,
                                     double offset, double tol, InputDistribution dist) {
  PropertyResult r{"shift-stability-32", false, 0.0, tol, trials,
                   fmt::format("score offset +{}", offset)};
  for (std::size_t t = 0; t < trials; ++t) {
    const CounterRng rng({seed, kShift, t});
    const std::size_t keys = draw_between(rng, 0, 8, 128);
    const std::size_t boundary = draw_between(rng, 1, 0, keys);
    std::uint64_t counter = 1000;
    auto draw = [&](std::size_t rows) {
      auto t = normal_tensor(rows, dim, rng, counter);
      if (dist == InputDistribution::UniformUnit) {
        for (auto& x : t.data()) x = 2.0 * rng.uniform(counter++) - 1.0;
      }
      return t.cast<float>();
    };
    const auto q = draw(8);
    const auto k = draw(keys);
    const auto v = draw(keys);
    const double scale = default_scale(dim);
    const auto base = streamed_merge(q, k, v, scale, boundary, {64, 0.0});
    const auto shifted = streamed_merge(q, k, v, scale, boundary, {64, offset});
    for (double x : shifted.data()) {
      if (!std::isfinite(x)) {
        r.max_error = std::numeric_limits<double>::infinity();
        r.note += "; non-finite output";
        return finish(r);
      }
    }
    r.max_error = std::max(r.max_error, max_abs_diff(base, shifted));
  }
  return finish(r);
}

PropertyResult check_no_kv_touch(const SyntheticModel& model, const RunConfig& run,
                                 const ReuseConfig& policy, std::size_t seeds,
                                 std::uint64_t first_seed) {
  PropertyResult r{"no-kv-touch-on-reuse", false, 0.0, 0.0, 0, ""};
  std::vector<std::vector<StepTrace>> traces(seeds);
  parallel_for(seeds, [&](std::size_t s) {
    traces[s] = run_sequence(model, run, policy, false, first_seed + s).traces;
  });
  std::size_t steps = 0, violations = 0;
  const auto block = static_cast<double>(run.sim.block_size);
  for (const auto& seq : traces) {
    for (const auto& t : seq) {
      ++steps;
      if (t.decision != StepDecision::Reuse) continue;
      ++r.cases;
      if (t.external_rows_read != 0.0 || t.keys_attended != block) ++violations;
      r.max_error = std::max(r.max_error, t.external_rows_read);
    }
  }
  if (steps == 0) {
    r.passed = true;
    r.note = "empty trace";
    return r;
  }
  r.passed = violations == 0;
  r.note = fmt::format("{} reuse steps of {}, {} violations", r.cases, steps, violations);
  return r;
}

PropertyResult check_baseline_equivalence(const SyntheticModel& model, const RunConfig& run,
                                          const ReuseConfig& policy, std::size_t seeds,
                                          std::uint64_t first_seed, double tol) {
  PropertyResult r{"baseline-equivalence", false, 0.0, tol, 0, ""};
  ReuseConfig dense = policy;
  dense.mode = ReuseMode::AlwaysRecompute;
  struct Cell {
    double worst = 0.0;
    std::size_t recompute_steps = 0;
    bool tokens_equal = true;
  };
  std::vector<Cell> cells(seeds);
  parallel_for(seeds, [&](std::size_t s) {
    const auto prompt = make_prompt(model, run.prompt_len, first_seed + s);
    const auto checked = run_sequence(model, prompt, run, policy, true);
    for (const auto& t : checked.traces) {
      if (t.decision == StepDecision::Reuse) continue;
      // A mixed step can still contain reused heads; only fully recomputed steps count.
      if (t.cache_hits != 0) continue;
      cells[s].worst = std::max(cells[s].worst, t.linf_gap.value_or(0.0));
      ++cells[s].recompute_steps;
    }
    if (policy.tau == 1 && policy.mode == ReuseMode::TokenThreshold) {
      cells[s].tokens_equal =
          run_sequence(model, prompt, run, dense, false).token_ids == checked.token_ids;
    }
  });
  std::size_t mismatches = 0;
  for (const auto& c : cells) {
    r.max_error = std::max(r.max_error, c.worst);
    r.cases += c.recompute_steps;
    mismatches += c.tokens_equal ? 0 : 1;
  }
  r.passed = r.max_error < tol && mismatches == 0;
  r.note = r.cases == 0 ? "empty trace"
                        : fmt::format("{} recompute steps, {} token mismatches", r.cases,
                                      mismatches);
  return r;
}

}  // namespace flashblock
