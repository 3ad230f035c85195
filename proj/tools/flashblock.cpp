// flashblock command-line driver.
//
// Exit codes: 0 success, 1 property failure or runtime error, 2 usage error.

#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "flashblock/analysis.hpp"
#include "flashblock/bench.hpp"
#include "flashblock/errors.hpp"
#include "flashblock/model.hpp"
#include "flashblock/reuse_policy.hpp"
#include "flashblock/sim.hpp"
#include "flashblock/sparse.hpp"
#include "flashblock/verify.hpp"

namespace fb = flashblock;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct ModelFlags {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t dim = 16;
  std::size_t vocab = 256;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--layers", layers, "model layers")->check(CLI::PositiveNumber);
    cmd->add_option("--heads", heads, "attention heads per layer")->check(CLI::PositiveNumber);
    cmd->add_option("--dim", dim, "head dimension")->check(CLI::PositiveNumber);
    cmd->add_option("--vocab", vocab, "vocabulary size (last id is the mask)")
        ->check(CLI::Range(2, 1 << 20));
  }

  [[nodiscard]] fb::ModelConfig config(std::uint64_t seed) const {
    fb::ModelConfig cfg;
    cfg.num_layers = layers;
    cfg.num_heads = heads;
    cfg.head_dim = dim;
    cfg.vocab_size = vocab;
    cfg.seed = seed;
    return cfg;
  }
};

struct Common {
  std::uint64_t seed = 0;
  std::string out;
  std::string invocation;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "base seed");
  cmd->add_option("--out", c.out, "output file (default: stdout)");
}

void emit(const Common& c, const std::string& body, bool csv = true) {
  std::string text = csv ? "# " + c.invocation + "\n" + body : body;
  if (c.out.empty()) {
    std::cout << text << std::flush;
    return;
  }
  std::ofstream f(c.out, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + c.out + " for writing");
  f << text;
}

std::string join_invocation(int argc, char** argv) {
  std::string s = "flashblock";
  for (int i = 1; i < argc; ++i) s += std::string(" ") + argv[i];
  return s;
}

// verify ---------------------------------------------------------------------

struct VerifyArgs {
  ModelFlags model;
  std::size_t blocks = 2;
  std::size_t block_size = 8;
  std::size_t tau = 2;
  std::size_t trials = 100;
  std::size_t seeds = 4;
  std::size_t prompt_len = 32;
};

int run_verify(const Common& c, const VerifyArgs& a) {
  std::vector<fb::PropertyResult> results;

  fb::DecompositionConfig dc;
  dc.trials = a.trials;
  dc.seed = c.seed;
  dc.min_layers = dc.max_layers = a.model.layers;
  dc.min_heads = dc.max_heads = a.model.heads;
  dc.dims = {a.model.dim};
  for (auto& r : fb::check_decomposition(dc)) results.push_back(std::move(r));
  results.push_back(fb::check_associativity(a.trials, c.seed, a.model.dim));

  const fb::SyntheticModel model(a.model.config(c.seed));
  fb::RunConfig run;
  run.prompt_len = a.prompt_len;
  run.num_blocks = a.blocks;
  run.sim.block_size = a.block_size;
  const fb::ReuseConfig policy{a.tau, 0.9, fb::ReuseMode::TokenThreshold};
  results.push_back(fb::check_no_kv_touch(model, run, policy, a.seeds, c.seed));
  results.push_back(fb::check_baseline_equivalence(model, run, policy, a.seeds, c.seed));

  std::ostringstream os;
  os << "property,status,max_error,tolerance,cases,note\n";
  bool all = true;
  for (const auto& r : results) {
    os << fmt::format("{},{},{:.3e},{:.0e},{},\"{}\"\n", r.name, r.passed ? "PASS" : "FAIL",
                      r.max_error, r.tolerance, r.cases, r.note);
    all = all && r.passed;
  }
  emit(c, os.str());
  return all ? 0 : kExitFailure;
}

// sweep-context --------------------------------------------------------------

struct SweepArgs {
  ModelFlags model;
  std::vector<std::size_t> contexts{128, 512, 2048, 8192};
  std::vector<std::size_t> taus{2, 3, 4};
  std::vector<std::string> policies{"reuse", "dense"};
  std::size_t block_size = 8;
};

int run_sweep_context(const Common& c, const SweepArgs& a) {
  const fb::SyntheticModel model(a.model.config(c.seed));
  fb::SweepConfig cfg;
  cfg.contexts = a.contexts;
  cfg.taus = a.taus;
  cfg.policies = a.policies;
  cfg.sim.block_size = a.block_size;
  cfg.seed = c.seed;
  const auto rows = fb::sweep_context(model, cfg);
  std::ostringstream os;
  fb::write_sweep_csv(os, rows);
  emit(c, os.str());
  for (const auto& g : fb::summarize_sweep(rows)) {
    std::cerr << fmt::format(
        "tau={}: dense slope {:.4f} R2 {:.6f}; total work growth dense x{:.2f} reuse x{:.2f} "
        "(ratio {:.3f}, increment ratio {:.3f})\n",
        g.tau, g.dense_fit.slope, g.dense_fit.r_squared, g.dense_growth, g.reuse_growth,
        g.growth_ratio, g.increment_ratio);
  }
  return 0;
}

// sweep-density --------------------------------------------------------------

struct DensityArgs {
  ModelFlags model;
  std::vector<double> densities{0.1, 0.2, 0.3, 0.4, 0.5};
  std::size_t seeds = 10;
  std::size_t prompt_len = 256;
  std::size_t block_size = 8;
  std::size_t key_block_size = 16;
  std::size_t layer = 0;
};

int run_sweep_density(const Common& c, const DensityArgs& a) {
  const fb::SyntheticModel model(a.model.config(c.seed));
  fb::SparseGapConfig cfg;
  cfg.layer = a.layer;
  cfg.prompt_len = a.prompt_len;
  cfg.block_size = a.block_size;
  cfg.key_block_size = a.key_block_size;
  cfg.num_seeds = a.seeds;
  cfg.first_seed = c.seed;
  const auto rows = fb::measure_sparse_gap(model, a.densities, cfg);
  std::ostringstream os;
  fb::write_gap_csv(os, rows);
  emit(c, os.str());
  return 0;
}

// analyze-similarity ---------------------------------------------------------

struct SimilarityArgs {
  ModelFlags model;
  std::size_t steps = 8;
  std::size_t prompt_len = 64;
  std::size_t block_size = 8;
  std::string full_out;
};

int run_analyze_similarity(const Common& c, const SimilarityArgs& a) {
  const fb::SyntheticModel model(a.model.config(c.seed));
  fb::StabilityConfig cfg;
  cfg.prompt_len = a.prompt_len;
  cfg.block_size = a.block_size;
  cfg.steps = a.steps;
  cfg.seed = c.seed;
  const auto study = fb::stability_study(model, cfg);
  if (study.summary.empty()) {
    std::cerr << "warning: fewer than two denoising steps, no step pairs to compare\n";
  }
  std::ostringstream os;
  fb::write_similarity_summary_csv(os, study.summary);
  emit(c, os.str());
  if (!a.full_out.empty()) {
    std::ostringstream full;
    fb::write_similarity_full_csv(full, study.full);
    emit({c.seed, a.full_out, c.invocation}, full.str());
  }
  if (!study.summary.empty()) {
    std::cerr << fmt::format("heads with external more stable than internal: {:.3f}\n",
                             study.fraction_external_more_stable());
  }
  return 0;
}

// calibrate-gates ------------------------------------------------------------

struct CalibrateArgs {
  ModelFlags model;
  fb::CalibrationOptions options;
};

int run_calibrate(const Common& c, CalibrateArgs a) {
  const fb::SyntheticModel model(a.model.config(c.seed));
  a.options.seed = c.seed;
  const auto table = fb::calibrate_head_gates(model, a.options);
  auto doc = table.to_json();
  doc["invocation"] = c.invocation;
  emit(c, doc.dump(2) + "\n", false);
  return 0;
}

// run ------------------------------------------------------------------------

struct RunArgs {
  ModelFlags model;
  std::size_t blocks = 2;
  std::size_t block_size = 8;
  std::size_t prompt_len = 32;
  std::size_t tau = 2;
  double gamma = 0.9;
  std::string mode = "token-threshold";
  std::string gates;
  double confidence = 0.0;
  bool verify = false;
};

int run_run(const Common& c, const RunArgs& a) {
  const fb::SyntheticModel model(a.model.config(c.seed));
  fb::RunConfig run;
  run.prompt_len = a.prompt_len;
  run.num_blocks = a.blocks;
  run.sim.block_size = a.block_size;
  run.sim.confidence_threshold = a.confidence;
  const fb::ReuseConfig policy{a.tau, a.gamma, fb::parse_reuse_mode(a.mode)};
  fb::HeadGateTable gates;
  fb::StepHooks hooks;
  if (!a.gates.empty()) {
    std::ifstream in(a.gates);
    if (!in) throw fb::ConfigError("cannot read gate table " + a.gates);
    gates = fb::HeadGateTable::from_json(nlohmann::json::parse(in));
    hooks.gates = &gates;
  } else if (policy.mode == fb::ReuseMode::HeadGated) {
    throw fb::ConfigError("--mode head-gated needs --gates FILE");
  }
  const auto result = fb::run_sequence(model, run, policy, a.verify, c.seed, hooks);
  std::ostringstream os;
  fb::write_trace_csv(os, result.traces);
  emit(c, os.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Block-attention reuse simulator and benchmarks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "flashblock 0.1.0");

  Common common;
  common.invocation = join_invocation(argc, argv);

  VerifyArgs verify;
  auto* cmd_verify = app.add_subcommand("verify", "check kernel and policy invariants");
  add_common(cmd_verify, common);
  verify.model.layers = 2;
  verify.model.heads = 2;
  verify.model.add_to(cmd_verify);
  cmd_verify->add_option("--blocks", verify.blocks, "blocks to generate per sequence");
  cmd_verify->add_option("--block-size", verify.block_size)->check(CLI::PositiveNumber);
  cmd_verify->add_option("--tau", verify.tau, "reuse threshold")->check(CLI::PositiveNumber);
  cmd_verify->add_option("--trials", verify.trials, "random kernel instances")
      ->check(CLI::PositiveNumber);
  cmd_verify->add_option("--seeds", verify.seeds, "sequences per policy check")
      ->check(CLI::PositiveNumber);
  cmd_verify->add_option("--prompt-len", verify.prompt_len);

  SweepArgs sweep;
  auto* cmd_sweep = app.add_subcommand("sweep-context", "per-step work versus context length");
  add_common(cmd_sweep, common);
  sweep.model.add_to(cmd_sweep);
  cmd_sweep->add_option("--contexts", sweep.contexts)->delimiter(',');
  cmd_sweep->add_option("--tau", sweep.taus)->delimiter(',')->check(CLI::PositiveNumber);
  cmd_sweep->add_option("--policy", sweep.policies, "reuse and/or dense")
      ->delimiter(',')
      ->check(CLI::IsMember({"reuse", "dense"}));
  cmd_sweep->add_option("--block-size", sweep.block_size)->check(CLI::PositiveNumber);

  DensityArgs density;
  auto* cmd_density =
      app.add_subcommand("sweep-density", "sparse attention gap with and without residual");
  add_common(cmd_density, common);
  density.model.add_to(cmd_density);
  cmd_density->add_option("--densities", density.densities)->delimiter(',');
  cmd_density->add_option("--seeds", density.seeds)->check(CLI::PositiveNumber);
  cmd_density->add_option("--prompt-len", density.prompt_len);
  cmd_density->add_option("--block-size", density.block_size)->check(CLI::PositiveNumber);
  cmd_density->add_option("--key-block-size", density.key_block_size)
      ->check(CLI::PositiveNumber);
  cmd_density->add_option("--layer", density.layer, "layer to measure");

  SimilarityArgs similarity;
  auto* cmd_sim =
      app.add_subcommand("analyze-similarity", "cross-step similarity of attention partials");
  add_common(cmd_sim, common);
  similarity.model.add_to(cmd_sim);
  cmd_sim->add_option("--steps", similarity.steps)->check(CLI::PositiveNumber);
  cmd_sim->add_option("--prompt-len", similarity.prompt_len);
  cmd_sim->add_option("--block-size", similarity.block_size)->check(CLI::PositiveNumber);
  cmd_sim->add_option("--full-out", similarity.full_out, "also write every B x B matrix here");

  CalibrateArgs calibrate;
  auto* cmd_cal = app.add_subcommand("calibrate-gates", "per-head reuse gates as JSON");
  add_common(cmd_cal, common);
  calibrate.model.add_to(cmd_cal);
  cmd_cal->add_option("--samples", calibrate.options.samples)->check(CLI::PositiveNumber);
  cmd_cal->add_option("--gamma", calibrate.options.gamma)->check(CLI::Range(0.0, 1.0));
  cmd_cal->add_option("--prompt-len", calibrate.options.prompt_len);
  cmd_cal->add_option("--block-size", calibrate.options.block_size)->check(CLI::PositiveNumber);

  RunArgs runa;
  auto* cmd_run = app.add_subcommand("run", "generate and write the per-step trace");
  add_common(cmd_run, common);
  runa.model.add_to(cmd_run);
  cmd_run->add_option("--blocks", runa.blocks);
  cmd_run->add_option("--block-size", runa.block_size)->check(CLI::PositiveNumber);
  cmd_run->add_option("--prompt-len", runa.prompt_len);
  cmd_run->add_option("--tau", runa.tau)->check(CLI::PositiveNumber);
  cmd_run->add_option("--gamma", runa.gamma)->check(CLI::Range(0.0, 1.0));
  cmd_run->add_option("--mode", runa.mode,
                      "token-threshold | head-gated | always-recompute | always-reuse");
  cmd_run->add_option("--gates", runa.gates, "gate table from calibrate-gates");
  cmd_run->add_option("--confidence", runa.confidence,
                      "unmask every position at least this confident (0: one per step)")
      ->check(CLI::Range(0.0, 1.0));
  cmd_run->add_flag("--verify", runa.verify, "compare every step against dense attention");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*cmd_verify) return run_verify(common, verify);
    if (*cmd_sweep) return run_sweep_context(common, sweep);
    if (*cmd_density) return run_sweep_density(common, density);
    if (*cmd_sim) return run_analyze_similarity(common, similarity);
    if (*cmd_cal) return run_calibrate(common, calibrate);
    if (*cmd_run) return run_run(common, runa);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
