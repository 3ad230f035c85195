#include <algorithm>
#include <cmath>
#include <limits>

#include "flashblock/analysis.hpp"
#include "flashblock/errors.hpp"
#include "flashblock/model.hpp"
#include "flashblock/reuse_policy.hpp"
#include "flashblock/sim.hpp"

namespace flashblock {

HeadGateTable calibrate_head_gates(const SyntheticModel& model, const CalibrationOptions& options) {
  if (options.samples == 0) throw ConfigError("calibration needs at least one sample");
  if (!(options.gamma >= 0.0 && options.gamma <= 1.0)) throw ConfigError("gamma outside [0, 1]");
  const auto& cfg = model.config();
  const std::size_t heads = cfg.num_layers * cfg.num_heads;

  std::vector<double> sum(heads, 0.0);
  std::vector<double> worst(heads, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> pairs(heads, 0);
  bool any_signal = false;

  for (std::size_t sample = 0; sample < options.samples; ++sample) {
    std::vector<std::vector<Tensor2D>> outs(heads);
    const HeadObserver observer = [&](const HeadObservation& obs) {
      outs[obs.layer * cfg.num_heads + obs.head].push_back(obs.external.out);
      for (double x : obs.external.out.data()) {
        if (std::abs(x) > 1e-12) {
          any_signal = true;
          break;
        }
      }
    };
    RunConfig run;
    run.prompt_len = options.prompt_len;
    run.num_blocks = 1;
    run.sim.block_size = options.block_size;
    ReuseConfig policy;
    policy.mode = ReuseMode::AlwaysRecompute;
    run_sequence(model, run, policy, false, options.seed + sample, {nullptr, &observer});

    for (std::size_t i = 0; i < heads; ++i) {
      for (std::size_t s = 0; s + 1 < outs[i].size(); ++s) {
        const double sim = mean_diagonal_similarity(outs[i][s], outs[i][s + 1]);
        sum[i] += sim;
        worst[i] = std::min(worst[i], sim);
        ++pairs[i];
      }
    }
  }
  if (!any_signal) {
    throw CalibrationError("block-external outputs are all zero; nothing to calibrate against");
  }

  HeadGateTable table;
  table.gamma = options.gamma;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      const std::size_t i = l * cfg.num_heads + h;
      HeadGate gate;
      gate.layer = l;
      gate.head = h;
      gate.similarity = pairs[i] == 0 ? 0.0 : sum[i] / static_cast<double>(pairs[i]);
      gate.min_similarity = pairs[i] == 0 ? 0.0 : worst[i];
      gate.enabled = gate.similarity > options.gamma;
      table.heads.push_back(gate);
    }
  }
  return table;
}

}  // namespace flashblock
