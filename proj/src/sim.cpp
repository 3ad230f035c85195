#include "flashblock/sim.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include <fmt/format.h>

#include "flashblock/block_source.hpp"
#include "flashblock/errors.hpp"
#include "flashblock/parallel.hpp"
#include "flashblock/rng.hpp"

namespace flashblock {
namespace {

enum : std::uint64_t { kQueryNoise = 101, kValueNoise, kPrompt };

void add_noise(Tensor2D& t, double sigma, const CounterRng& rng) {
  if (sigma <= 0.0) return;
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += sigma * rng.normal(i);
}

double sum_of(const Tensor2D& t) {
  auto d = t.data();
  return std::accumulate(d.begin(), d.end(), 0.0);
}

struct Candidate {
  std::size_t position;
  TokenId token;
  double confidence;
};

std::vector<Candidate> rank_candidates(const SyntheticModel& model, const Tensor2D& logits,
                                       std::span<const std::size_t> masked) {
  const TokenId mask = model.mask_token();
  std::vector<Candidate> out;
  out.reserve(masked.size());
  for (std::size_t pos : masked) {
    auto row = logits.row(pos);
    TokenId best = -1;
    double best_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < row.size(); ++t) {
      if (static_cast<TokenId>(t) == mask) continue;
      if (row[t] > best_logit) {
        best_logit = row[t];
        best = static_cast<TokenId>(t);
      }
    }
    double z = 0.0;
    for (std::size_t t = 0; t < row.size(); ++t) {
      if (static_cast<TokenId>(t) != mask) z += std::exp(row[t] - best_logit);
    }
    out.push_back({pos, best, 1.0 / z});
  }
  std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    return a.confidence > b.confidence;
  });
  return out;
}

}  // namespace

void SimOptions::validate() const {
  if (block_size == 0) throw ConfigError("block_size must be >= 1");
  if (unmask_per_step == 0) throw ConfigError("unmask_per_step must be >= 1");
  if (confidence_threshold < 0.0 || confidence_threshold > 1.0) {
    throw ConfigError("confidence_threshold must lie in [0, 1]");
  }
  if (tile_size == 0) throw ConfigError("tile_size must be >= 1");
}

std::vector<std::size_t> BlockState::masked_positions(TokenId mask) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < token_ids.size(); ++i) {
    if (token_ids[i] == mask) out.push_back(i);
  }
  return out;
}

std::string_view to_string(StepDecision d) {
  switch (d) {
    case StepDecision::FirstVisit: return "first-visit";
    case StepDecision::Reuse: return "reuse";
    case StepDecision::Recompute: return "recompute";
  }
  return "unknown";
}

BlockState start_block(const SyntheticModel& model, std::size_t block_id,
                       std::size_t context_len, std::size_t block_size) {
  BlockState s;
  s.block_id = block_id;
  s.context_len = context_len;
  s.token_ids.assign(block_size, model.mask_token());
  s.previous_ids = s.token_ids;
  return s;
}

StepOutcome denoise_step(const SyntheticModel& model, const BlockState& state, KvCache& kv,
                         ExternalAttnCache<double>& ext_cache, const ReuseConfig& policy,
                         const SimOptions& options, bool verify, const StepHooks& hooks) {
  options.validate();
  policy.validate();
  const auto& cfg = model.config();
  const TokenId mask = model.mask_token();
  const auto masked = state.masked_positions(mask);
  if (masked.empty()) throw ConfigError("denoise_step called on a finished block");

  const std::size_t block = state.token_ids.size();
  const std::size_t ctx = state.context_len;
  const bool first_visit = state.step_index == 0;
  const std::size_t updated =
      first_visit ? 0 : count_updated_tokens(state.previous_ids, state.token_ids);
  const double scale = default_scale(cfg.head_dim);
  const StreamOptions stream_opts{options.tile_size, 0.0};

  StepTrace trace;
  trace.block_id = state.block_id;
  trace.step_index = state.step_index;
  trace.updated_tokens = updated;

  const auto before = kv.snapshot_counters();
  std::size_t keys_total = 0;
  std::size_t local_rows = 0;
  double worst_gap = 0.0;

  Tensor2D hidden = model.embed(state.token_ids, ctx);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto normed = model.normalize(hidden);
    std::vector<Tensor2D> outputs(cfg.num_heads);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      auto p = model.project(l, h, normed);
      const auto& fixture = model.head_fixture(l, h);
      add_noise(p.q, fixture.query_noise,
                CounterRng({cfg.seed, kQueryNoise, state.block_id, state.step_index, l, h}));
      add_noise(p.v, fixture.block_value_noise,
                CounterRng({cfg.seed, kValueNoise, state.block_id, state.step_index, l, h}));

      const bool gate = hooks.gates == nullptr || hooks.gates->enabled(l, h);
      const auto decision = decide(policy, ext_cache.valid(l, h), first_visit, updated, gate);
      std::size_t keys = 0;
      if (decision == ReuseDecision::Reuse) {
        const auto* entry = ext_cache.lookup(l, h);
        auto r = attention_with_reuse(p.q, entry, p.k, p.v, scale, stream_opts);
        keys = block;
        local_rows += block;
        ++trace.cache_hits;
        outputs[h] = std::move(r.output);
        if (hooks.observer) {
          (*hooks.observer)({l, h, state.block_id, state.step_index, ctx, true, p.q, p.k, p.v,
                             entry->external, r.internal, outputs[h], kv});
        }
      } else {
        BlockCausalSource source(kv, l, h, ctx, p.k, p.v);
        auto parts = attention_streamed(p.q, source, scale, ctx, stream_opts);
        keys = ctx + block;
        local_rows += source.local_rows_read();
        outputs[h] = merge_partials(parts.external, parts.internal);
        if (hooks.observer) {
          (*hooks.observer)({l, h, state.block_id, state.step_index, ctx, false, p.q, p.k, p.v,
                             parts.external, parts.internal, outputs[h], kv});
        }
        ext_cache.store(l, h, std::move(parts.external), state.block_id, state.step_index);
      }
      keys_total += keys;
      trace.attention_flops += 4ull * block * keys * cfg.head_dim + 4ull * block * cfg.head_dim;
      trace.output_checksum += sum_of(outputs[h]);

      if (verify) {
        auto ref = kv.peek_range(l, h, 0, ctx);
        ref.keys.append_rows(p.k);
        ref.values.append_rows(p.v);
        const auto dense = attention_dense(p.q, ref.keys, ref.values, scale);
        worst_gap = std::max(worst_gap, max_abs_diff(outputs[h], dense));
      }
    }
    model.add_attention_output(l, outputs, hidden);
  }
  const auto delta = kv.snapshot_counters() - before;

  const double pairs = static_cast<double>(cfg.num_layers * cfg.num_heads);
  trace.keys_attended = static_cast<double>(keys_total) / pairs;
  trace.external_rows_read = static_cast<double>(delta.key_rows_read) / pairs;
  trace.kv_rows_read = static_cast<double>(delta.key_rows_read + local_rows) / pairs;
  if (first_visit) {
    trace.decision = StepDecision::FirstVisit;
  } else if (trace.cache_hits == cfg.num_layers * cfg.num_heads) {
    trace.decision = StepDecision::Reuse;
  } else {
    trace.decision = StepDecision::Recompute;
  }
  if (verify) trace.linf_gap = worst_gap;

  // Unmask: confidence-greedy, deterministic.
  const auto logits = model.logits(hidden);
  const auto ranked = rank_candidates(model, logits, masked);
  std::size_t count = 0;
  if (state.step_index + 1 >= options.step_budget()) {
    count = ranked.size();
  } else if (options.confidence_threshold > 0.0) {
    count = static_cast<std::size_t>(
        std::count_if(ranked.begin(), ranked.end(), [&](const Candidate& c) {
          return c.confidence >= options.confidence_threshold;
        }));
    count = std::max<std::size_t>(count, 1);
  } else {
    count = std::min(options.unmask_per_step, ranked.size());
  }

  StepOutcome outcome{state, std::move(trace)};
  outcome.state.previous_ids = state.token_ids;
  for (std::size_t i = 0; i < count; ++i) {
    outcome.state.token_ids[ranked[i].position] = ranked[i].token;
  }
  outcome.state.step_index = state.step_index + 1;
  return outcome;
}

void commit_block(const SyntheticModel& model, std::span<const TokenId> ids,
                  std::size_t context_len, KvCache& kv, ExternalAttnCache<double>& ext_cache,
                  std::size_t tile_size) {
  const auto& cfg = model.config();
  if (ids.empty()) throw ShapeError("commit_block: empty block");
  const double scale = default_scale(cfg.head_dim);
  std::vector<Tensor2D> keys(cfg.num_layers * cfg.num_heads);
  std::vector<Tensor2D> values(keys.size());

  Tensor2D hidden = model.embed(ids, context_len);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto normed = model.normalize(hidden);
    std::vector<Tensor2D> outputs(cfg.num_heads);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      auto p = model.project(l, h, normed);
      BlockCausalSource source(kv, l, h, context_len, p.k, p.v);
      auto parts = attention_streamed(p.q, source, scale, context_len, {tile_size, 0.0});
      outputs[h] = merge_partials(parts.external, parts.internal);
      keys[l * cfg.num_heads + h] = std::move(p.k);
      values[l * cfg.num_heads + h] = std::move(p.v);
    }
    model.add_attention_output(l, outputs, hidden);
  }
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      kv.commit_block(l, h, keys[l * cfg.num_heads + h], values[l * cfg.num_heads + h]);
    }
  }
  ext_cache.invalidate_all();
}

void prefill(const SyntheticModel& model, std::span<const TokenId> prompt, KvCache& kv,
             ExternalAttnCache<double>& ext_cache, std::size_t block_size,
             std::size_t tile_size) {
  if (block_size == 0) throw ConfigError("block_size must be >= 1");
  for (std::size_t begin = 0; begin < prompt.size(); begin += block_size) {
    const std::size_t end = std::min(begin + block_size, prompt.size());
    commit_block(model, prompt.subspan(begin, end - begin), begin, kv, ext_cache, tile_size);
  }
}

std::vector<TokenId> make_prompt(const SyntheticModel& model, std::size_t length,
                                 std::uint64_t seed) {
  CounterRng rng({seed, kPrompt});
  std::vector<TokenId> out(length);
  const auto usable = static_cast<std::uint64_t>(model.config().vocab_size - 1);
  for (std::size_t i = 0; i < length; ++i) out[i] = static_cast<TokenId>(rng.below(i, usable));
  return out;
}

SequenceResult run_sequence(const SyntheticModel& model, std::span<const TokenId> prompt,
                            const RunConfig& config, const ReuseConfig& policy, bool verify,
                            const StepHooks& hooks) {
  config.sim.validate();
  policy.validate();
  const auto& cfg = model.config();
  KvCache kv(cfg.num_layers, cfg.num_heads, cfg.head_dim);
  ExternalAttnCache<double> ext(cfg.num_layers, cfg.num_heads);

  SequenceResult result;
  result.token_ids.assign(prompt.begin(), prompt.end());
  prefill(model, prompt, kv, ext, config.sim.block_size, config.sim.tile_size);

  const TokenId mask = model.mask_token();
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    auto state = start_block(model, b, result.token_ids.size(), config.sim.block_size);
    while (!state.finished(mask)) {
      auto outcome = denoise_step(model, state, kv, ext, policy, config.sim, verify, hooks);
      result.traces.push_back(std::move(outcome.trace));
      state = std::move(outcome.state);
    }
    commit_block(model, state.token_ids, state.context_len, kv, ext, config.sim.tile_size);
    result.token_ids.insert(result.token_ids.end(), state.token_ids.begin(),
                            state.token_ids.end());
  }
  result.counters = kv.snapshot_counters();
  return result;
}

SequenceResult run_sequence(const SyntheticModel& model, const RunConfig& config,
                            const ReuseConfig& policy, bool verify, std::uint64_t seed,
                            const StepHooks& hooks) {
  const auto prompt = make_prompt(model, config.prompt_len, seed);
  return run_sequence(model, prompt, config, policy, verify, hooks);
}

QualityReport quality_probe(const SyntheticModel& model, const ReuseConfig& policy_a,
                            const ReuseConfig& policy_b, const ProbeConfig& config,
                            const HeadGateTable* gates) {
  if (config.num_seeds == 0) throw ConfigError("quality_probe needs at least one seed");
  struct SeedResult {
    bool match = false;
    std::vector<StepTrace> traces;
  };
  std::vector<SeedResult> per_seed(config.num_seeds);
  const StepHooks hooks{gates, nullptr};
  parallel_for(config.num_seeds, [&](std::size_t i) {
    const auto prompt = make_prompt(model, config.run.prompt_len, config.first_seed + i);
    const auto a = run_sequence(model, prompt, config.run, policy_a, false, hooks);
    auto b = run_sequence(model, prompt, config.run, policy_b, true, hooks);
    per_seed[i].match = a.token_ids == b.token_ids;
    per_seed[i].traces = std::move(b.traces);
  });

  QualityReport report;
  report.sequences = config.num_seeds;
  double gap_total = 0.0;
  std::size_t gap_steps = 0;
  for (const auto& r : per_seed) {
    report.per_seed_match.push_back(r.match);
    report.exact_matches += r.match ? 1 : 0;
    for (const auto& t : r.traces) {
      const double g = t.linf_gap.value_or(0.0);
      gap_total += g;
      report.max_linf_gap = std::max(report.max_linf_gap, g);
      ++gap_steps;
      if (t.step_index > 0) ++report.m_histogram[t.updated_tokens];
    }
  }
  report.match_rate =
      static_cast<double>(report.exact_matches) / static_cast<double>(report.sequences);
  report.mean_linf_gap = gap_steps == 0 ? 0.0 : gap_total / static_cast<double>(gap_steps);
  return report;
}

void write_trace_csv(std::ostream& out, std::span<const StepTrace> traces) {
  out << "block_id,step,decision,M,keys_attended,kv_rows_read,checksum,linf_gap\n";
  for (const auto& t : traces) {
    out << fmt::format("{},{},{},{},{},{},{:.17g},{}\n", t.block_id, t.step_index,
                       to_string(t.decision), t.updated_tokens, t.keys_attended, t.kv_rows_read,
                       t.output_checksum,
                       t.linf_gap ? fmt::format("{:.6e}", *t.linf_gap) : std::string());
  }
}

}  // namespace flashblock
