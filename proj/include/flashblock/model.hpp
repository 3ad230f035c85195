#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "flashblock/reuse_policy.hpp"
#include "flashblock/tensor.hpp"

namespace flashblock {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t head_dim = 16;
  std::uint64_t seed = 0;
  /// Add sinusoidal position vectors to token embeddings.
  bool positional = true;
  /// Multiplier on the query and key projections; larger means sharper attention.
  double qk_gain = 1.5;
  /// Multiplier on output logits.
  double logit_gain = 4.0;

  void validate() const;
};

/// Test fixtures that distort one head's projections in controlled ways.
struct HeadFixture {
  /// Every token projects to the same value vector.
  bool constant_values = false;
  /// Stddev of Gaussian noise added to this head's queries at each denoise step.
  double query_noise = 0.0;
  /// Stddev of Gaussian noise added to the in-block values at each denoise step.
  double block_value_noise = 0.0;
};

struct HeadProjections {
  Tensor2D q;
  Tensor2D k;
  Tensor2D v;
};

/// Deterministic toy transformer over discrete tokens. All weights come from
/// a counter-based generator keyed on the seed, so equal configs give
/// bitwise-equal models. The highest vocabulary id is the mask token.
///
/// Layer l: x = rmsnorm(h); per head (q, k, v) = x W; h += concat(attn) W_o.
/// Logits are rmsnorm(h) against the tied embedding table.
class SyntheticModel {
 public:
  explicit SyntheticModel(ModelConfig config);

  [[nodiscard]] const ModelConfig& config() const noexcept { return config_; }
  [[nodiscard]] std::size_t model_dim() const noexcept {
    return config_.num_heads * config_.head_dim;
  }
  [[nodiscard]] TokenId mask_token() const noexcept {
    return static_cast<TokenId>(config_.vocab_size - 1);
  }

  [[nodiscard]] Tensor2D embed(std::span<const TokenId> ids, std::size_t first_position) const;
  [[nodiscard]] Tensor2D normalize(const Tensor2D& hidden) const;
  [[nodiscard]] HeadProjections project(std::size_t layer, std::size_t head,
                                        const Tensor2D& normed) const;
  /// hidden += concat(head_outputs) W_o for the given layer.
  void add_attention_output(std::size_t layer, std::span<const Tensor2D> head_outputs,
                            Tensor2D& hidden) const;
  [[nodiscard]] Tensor2D logits(const Tensor2D& hidden) const;

  void set_head_fixture(std::size_t layer, std::size_t head, const HeadFixture& fixture);
  [[nodiscard]] const HeadFixture& head_fixture(std::size_t layer, std::size_t head) const;

  [[nodiscard]] const Tensor2D& embeddings() const noexcept { return embedding_; }

 private:
  struct HeadWeights {
    Tensor2D wq, wk, wv;      // model_dim x head_dim
    std::vector<double> constant_value;
  };

  std::size_t head_index(std::size_t layer, std::size_t head) const;

  ModelConfig config_;
  Tensor2D embedding_;              // vocab x model_dim
  std::vector<HeadWeights> heads_;  // layer-major
  std::vector<Tensor2D> out_proj_;  // per layer, model_dim x model_dim
  std::vector<HeadFixture> fixtures_;
};

}  // namespace flashblock
