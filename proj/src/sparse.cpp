#include "flashblock/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <fmt/format.h>

#include "flashblock/errors.hpp"
#include "flashblock/linalg.hpp"
#include "flashblock/parallel.hpp"

namespace flashblock {

SparseMask::SparseMask(std::size_t block_id_, double density_, std::size_t key_block_size_,
                       std::size_t context_len_, std::size_t num_layers_,
                       std::size_t num_heads_)
    : block_id(block_id_),
      density(density_),
      key_block_size(key_block_size_),
      context_len(context_len_),
      num_layers(num_layers_),
      num_heads(num_heads_),
      selected(num_layers_ * num_heads_) {
  if (!(density > 0.0 && density <= 1.0)) throw ConfigError("density must lie in (0, 1]");
  if (key_block_size == 0) throw ConfigError("key_block_size must be >= 1");
}

const std::vector<std::size_t>& SparseMask::selection(std::size_t layer, std::size_t head) const {
  if (layer >= num_layers || head >= num_heads) throw BoundsError("sparse mask: no such head");
  return selected[layer * num_heads + head];
}

void SparseMask::set_selection(std::size_t layer, std::size_t head,
                               std::vector<std::size_t> blocks) {
  if (layer >= num_layers || head >= num_heads) throw BoundsError("sparse mask: no such head");
  std::sort(blocks.begin(), blocks.end());
  blocks.erase(std::unique(blocks.begin(), blocks.end()), blocks.end());
  if (!blocks.empty() && blocks.back() >= context_blocks()) {
    throw BoundsError("sparse mask selects key block " + std::to_string(blocks.back()) +
                      " of " + std::to_string(context_blocks()));
  }
  selected[layer * num_heads + head] = std::move(blocks);
}

bool SparseMask::is_selected(std::size_t layer, std::size_t head, std::size_t key) const {
  const auto& s = selection(layer, head);
  return std::binary_search(s.begin(), s.end(), key / key_block_size);
}

std::size_t SparseMask::selected_context_keys(std::size_t layer, std::size_t head) const {
  std::size_t n = 0;
  for (std::size_t b : selection(layer, head)) {
    n += std::min((b + 1) * key_block_size, context_len) - b * key_block_size;
  }
  return n;
}

double SparseMask::realized_density(std::size_t layer, std::size_t head) const {
  if (context_len == 0) return 1.0;
  return static_cast<double>(selected_context_keys(layer, head)) /
         static_cast<double>(context_len);
}

std::vector<std::size_t> select_key_blocks(const Tensor2D& q, const Tensor2D& keys,
                                           std::size_t context_len, double density,
                                           std::size_t key_block_size, double scale) {
  if (!(density > 0.0 && density <= 1.0)) throw ConfigError("density must lie in (0, 1]");
  if (key_block_size == 0) throw ConfigError("key_block_size must be >= 1");
  if (keys.rows() < context_len) throw BoundsError("fewer keys than the context length");
  if (q.cols() != keys.cols()) throw ShapeError("query/key width mismatch");
  const std::size_t n_blocks = (context_len + key_block_size - 1) / key_block_size;
  if (n_blocks == 0) return {};

  // Full attention once, then probability mass per context key block.
  Tensor2D scores(q.rows(), keys.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    for (std::size_t j = 0; j < keys.rows(); ++j) scores(i, j) = dot(q.row(i), keys.row(j)) * scale;
  }
  const auto probs = softmax_rows(scores);
  std::vector<double> mass(n_blocks, 0.0);
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    for (std::size_t j = 0; j < context_len; ++j) mass[j / key_block_size] += probs(i, j);
  }

  const double want = std::ceil(density * static_cast<double>(context_len) /
                                    static_cast<double>(key_block_size) -
                                1e-9);
  const std::size_t k =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::max(want, 1.0)), 1, n_blocks);

  std::vector<std::size_t> order(n_blocks);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return mass[a] > mass[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

SparseMask build_sparse_mask(std::size_t block_id, const Tensor2D& q, const Tensor2D& keys,
                             std::size_t context_len, double density,
                             std::size_t key_block_size, double scale) {
  SparseMask mask(block_id, density, key_block_size, context_len, 1, 1);
  mask.set_selection(0, 0,
                     select_key_blocks(q, keys, context_len, density, key_block_size, scale));
  return mask;
}

namespace detail {

void check_mask(const SparseMask& mask, std::size_t block_id, std::size_t source_len,
                std::size_t block_queries) {
  if (mask.block_id != block_id) {
    throw StalenessError("sparse mask built for block " + std::to_string(mask.block_id) +
                         " applied to block " + std::to_string(block_id));
  }
  // The stream must be exactly the mask's context followed by the block's own rows.
  if (mask.context_len > source_len || source_len - mask.context_len != block_queries) {
    throw StalenessError("sparse mask context length " + std::to_string(mask.context_len) +
                         " does not fit a key stream of " + std::to_string(source_len));
  }
}

}  // namespace detail

std::vector<SparseGapRow> measure_sparse_gap(const SyntheticModel& model,
                                             std::span<const double> densities,
                                             const SparseGapConfig& config) {
  const auto& cfg = model.config();
  if (config.layer >= cfg.num_layers) throw BoundsError("gap layer outside the model");
  for (double d : densities) {
    if (!(d > 0.0 && d <= 1.0)) throw ConfigError("densities must lie in (0, 1]");
  }
  const std::size_t nd = densities.size();
  const double scale = default_scale(cfg.head_dim);

  // [seed][density] -> (sum sparse-only, sum with-residual, samples)
  struct Acc {
    double sparse_only = 0.0;
    double with_residual = 0.0;
    std::size_t samples = 0;
  };
  std::vector<std::vector<Acc>> acc(config.num_seeds, std::vector<Acc>(nd));

  parallel_for(config.num_seeds, [&](std::size_t s) {
    const std::uint64_t seed = config.first_seed + s;
    std::vector<SparseMask> masks;
    std::vector<std::vector<AttnPartial<double>>> residuals(
        nd, std::vector<AttnPartial<double>>(cfg.num_heads));

    const HeadObserver observer = [&](const HeadObservation& obs) {
      if (obs.layer != config.layer || obs.block_id != 0) return;
      auto all = obs.kv.peek_range(obs.layer, obs.head, 0, obs.context_len);
      all.keys.append_rows(obs.block_keys);
      all.values.append_rows(obs.block_values);
      TensorKvSource<double> source(all.keys, all.values);
      if (obs.step_index == 0) {
        if (masks.empty()) {
          for (double d : densities) {
            masks.emplace_back(0, d, config.key_block_size, obs.context_len, cfg.num_layers,
                               cfg.num_heads);
          }
        }
        for (std::size_t di = 0; di < nd; ++di) {
          masks[di].set_selection(obs.layer, obs.head,
                                  select_key_blocks(obs.q, all.keys, obs.context_len,
                                                    densities[di], config.key_block_size,
                                                    scale));
          auto first = sparse_attention_with_residual(obs.q, masks[di], obs.layer, obs.head, 0,
                                                      source, nullptr, scale);
          residuals[di][obs.head] = std::move(first.residual);
        }
        return;
      }
      const auto dense = attention_dense(obs.q, all.keys, all.values, scale);
      for (std::size_t di = 0; di < nd; ++di) {
        const auto only =
            sparse_attention_only(obs.q, masks[di], obs.layer, obs.head, 0, source, scale);
        const auto with = sparse_attention_with_residual(obs.q, masks[di], obs.layer, obs.head,
                                                         0, source, &residuals[di][obs.head],
                                                         scale);
        acc[s][di].sparse_only += mean_abs_diff(only, dense);
        acc[s][di].with_residual += mean_abs_diff(with.output, dense);
        ++acc[s][di].samples;
      }
    };

    RunConfig run{config.prompt_len, 1, config.sim};
    run.sim.block_size = config.block_size;
    ReuseConfig dense_policy;
    dense_policy.mode = ReuseMode::AlwaysRecompute;
    run_sequence(model, run, dense_policy, false, seed, StepHooks{nullptr, &observer});
  });

  std::vector<SparseGapRow> rows;
  rows.reserve(nd * config.num_seeds);
  for (std::size_t di = 0; di < nd; ++di) {
    for (std::size_t s = 0; s < config.num_seeds; ++s) {
      const auto& a = acc[s][di];
      const double n = a.samples == 0 ? 1.0 : static_cast<double>(a.samples);
      rows.push_back({densities[di], a.sparse_only / n, a.with_residual / n,
                      config.first_seed + s});
    }
  }
  return rows;
}

void write_gap_csv(std::ostream& out, std::span<const SparseGapRow> rows) {
  out << "# l1 = mean absolute difference per output element vs dense attention\n";
  out << "density,l1_sparse_only,l1_with_residual,seed\n";
  for (const auto& r : rows) {
    out << fmt::format("{},{:.9e},{:.9e},{}\n", r.density, r.l1_sparse_only,
                       r.l1_with_residual, r.seed);
  }
}

}  // namespace flashblock
