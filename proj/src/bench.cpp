#include "flashblock/bench.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <set>

#include <fmt/format.h>

#include "flashblock/errors.hpp"

namespace flashblock {

std::vector<SweepRow> sweep_context(const SyntheticModel& model, const SweepConfig& config) {
  config.sim.validate();
  for (std::size_t i = 1; i < config.contexts.size(); ++i) {
    if (config.contexts[i] <= config.contexts[i - 1]) {
      throw ConfigError("contexts must be strictly increasing");
    }
  }
  for (const auto& p : config.policies) {
    if (p != "reuse" && p != "dense") throw ConfigError("unknown sweep policy '" + p + "'");
  }
  const auto& cfg = model.config();
  const TokenId mask = model.mask_token();
  std::vector<SweepRow> rows;

  for (std::size_t context : config.contexts) {
    KvCache kv(cfg.num_layers, cfg.num_heads, cfg.head_dim);
    ExternalAttnCache<double> warmup(cfg.num_layers, cfg.num_heads);
    const auto prompt = make_prompt(model, context, config.seed);
    prefill(model, prompt, kv, warmup, config.sim.block_size, config.sim.tile_size);

    for (std::size_t tau : config.taus) {
      for (const auto& policy_name : config.policies) {
        ReuseConfig policy;
        policy.tau = tau;
        policy.mode = policy_name == "dense" ? ReuseMode::AlwaysRecompute
                                             : ReuseMode::TokenThreshold;
        ExternalAttnCache<double> ext(cfg.num_layers, cfg.num_heads);
        auto state = start_block(model, 0, context, config.sim.block_size);
        while (!state.finished(mask)) {
          const auto t0 = std::chrono::steady_clock::now();
          auto outcome = denoise_step(model, state, kv, ext, policy, config.sim, false);
          const auto t1 = std::chrono::steady_clock::now();
          const auto& t = outcome.trace;
          rows.push_back({context, tau, policy_name, t.step_index, t.decision, t.keys_attended,
                          t.kv_rows_read, t.external_rows_read,
                          std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()});
          state = std::move(outcome.state);
        }
      }
    }
  }
  return rows;
}

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
  out << "context,tau,policy,step,keys_attended,kv_rows_read,wall_ns\n";
  for (const auto& r : rows) {
    out << fmt::format("{},{},{},{},{},{},{}\n", r.context, r.tau, r.policy, r.step,
                       r.keys_attended, r.kv_rows_read, r.wall_ns);
  }
}

LinearFit fit_line(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ShapeError("fit_line needs >= 2 paired points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  LinearFit fit;
  fit.slope = sxx == 0.0 ? 0.0 : sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.r_squared = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return fit;
}

std::vector<GrowthSummary> summarize_sweep(std::span<const SweepRow> rows) {
  std::vector<GrowthSummary> out;
  std::set<std::size_t> taus;
  for (const auto& r : rows) taus.insert(r.tau);
  for (std::size_t tau : taus) {
    std::map<std::size_t, double> dense_work, reuse_work;
    std::vector<double> xs, ys;
    std::set<double> reuse_reads;
    for (const auto& r : rows) {
      if (r.tau != tau) continue;
      if (r.policy == "dense") {
        dense_work[r.context] += r.kv_rows_read;
        xs.push_back(static_cast<double>(r.context));
        ys.push_back(r.kv_rows_read);
      } else {
        reuse_work[r.context] += r.kv_rows_read;
        if (r.decision == StepDecision::Reuse) reuse_reads.insert(r.kv_rows_read);
      }
    }
    if (dense_work.size() < 2 || reuse_work.size() < 2) continue;
    GrowthSummary g;
    g.tau = tau;
    g.dense_fit = fit_line(xs, ys);
    g.reuse_step_reads.assign(reuse_reads.begin(), reuse_reads.end());
    const double d_min = dense_work.begin()->second, d_max = dense_work.rbegin()->second;
    const double r_min = reuse_work.begin()->second, r_max = reuse_work.rbegin()->second;
    g.dense_growth = d_max / d_min;
    g.reuse_growth = r_max / r_min;
    g.growth_ratio = g.reuse_growth / g.dense_growth;
    g.increment_ratio = (r_max - r_min) / (d_max - d_min);
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace flashblock
