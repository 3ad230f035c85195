#include "flashblock/analysis.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <utility>

#include <fmt/format.h>

#include "flashblock/errors.hpp"
#include "flashblock/linalg.hpp"

namespace flashblock {
namespace {

void check_same_shape(const Tensor2D& a, const Tensor2D& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("step similarity needs equally shaped outputs");
  }
}

}  // namespace

Tensor2D pairwise_step_similarity(const Tensor2D& step_s, const Tensor2D& step_s1) {
  check_same_shape(step_s, step_s1);
  const std::size_t b = step_s.rows();
  Tensor2D sim(b, b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      sim(i, j) = cosine_similarity(step_s.row(j), step_s1.row(i));
    }
  }
  return sim;
}

double mean_diagonal_similarity(const Tensor2D& step_s, const Tensor2D& step_s1) {
  check_same_shape(step_s, step_s1);
  if (step_s.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < step_s.rows(); ++i) {
    total += cosine_similarity(step_s.row(i), step_s1.row(i));
  }
  return total / static_cast<double>(step_s.rows());
}

double StabilityStudy::fraction_external_more_stable() const {
  std::map<std::pair<std::size_t, std::size_t>, std::pair<double, double>> per_head;
  for (const auto& r : summary) {
    auto& [out, in] = per_head[{r.layer, r.head}];
    out += r.mean_diag_out;
    in += r.mean_diag_in;
  }
  if (per_head.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t wins = 0;
  for (const auto& [key, sums] : per_head) wins += sums.first > sums.second ? 1 : 0;
  return static_cast<double>(wins) / static_cast<double>(per_head.size());
}

StabilityStudy stability_study(const SyntheticModel& model, const StabilityConfig& config) {
  if (config.steps == 0) throw ConfigError("stability study needs at least one step");
  const auto& cfg = model.config();
  const std::size_t heads = cfg.num_layers * cfg.num_heads;
  // [layer * H + head][step] -> (A_out, A_in)
  std::vector<std::vector<std::pair<Tensor2D, Tensor2D>>> recorded(heads);

  const HeadObserver observer = [&](const HeadObservation& obs) {
    recorded[obs.layer * cfg.num_heads + obs.head].emplace_back(obs.external.out,
                                                                obs.internal.out);
  };

  RunConfig run;
  run.prompt_len = config.prompt_len;
  run.num_blocks = 1;
  run.sim.block_size = config.block_size;
  run.sim.steps_per_block = config.steps;
  ReuseConfig policy;
  policy.mode = ReuseMode::AlwaysRecompute;
  const StepHooks hooks{nullptr, &observer};
  if (config.prompt) {
    run_sequence(model, *config.prompt, run, policy, false, hooks);
  } else {
    run_sequence(model, run, policy, false, config.seed, hooks);
  }

  StabilityStudy study;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      const auto& steps = recorded[l * cfg.num_heads + h];
      for (std::size_t s = 0; s + 1 < steps.size(); ++s) {
        const auto& [out_s, in_s] = steps[s];
        const auto& [out_s1, in_s1] = steps[s + 1];
        study.summary.push_back({l, h, s, mean_diagonal_similarity(out_s, out_s1),
                                 mean_diagonal_similarity(in_s, in_s1)});
        const auto full = pairwise_step_similarity(out_s, out_s1);
        for (std::size_t i = 0; i < full.rows(); ++i) {
          for (std::size_t j = 0; j < full.cols(); ++j) {
            study.full.push_back({l, h, s, i, j, full(i, j)});
          }
        }
      }
    }
  }
  return study;
}

void write_similarity_full_csv(std::ostream& out, std::span<const SimilarityCell> cells) {
  out << "layer,head,step,i,j,sim\n";
  for (const auto& c : cells) {
    out << fmt::format("{},{},{},{},{},{:.9f}\n", c.layer, c.head, c.step, c.i, c.j, c.sim);
  }
}

void write_similarity_summary_csv(std::ostream& out, std::span<const StabilityRecord> records) {
  out << "layer,head,step,mean_diag_out,mean_diag_in\n";
  for (const auto& r : records) {
    out << fmt::format("{},{},{},{:.9f},{:.9f}\n", r.layer, r.head, r.step, r.mean_diag_out,
                       r.mean_diag_in);
  }
}

}  // namespace flashblock
