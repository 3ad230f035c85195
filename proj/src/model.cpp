#include "flashblock/model.hpp"

#include <cmath>
#include <string>

#include "flashblock/errors.hpp"
#include "flashblock/linalg.hpp"
#include "flashblock/rng.hpp"

namespace flashblock {
namespace {

enum : std::uint64_t { kEmbed = 1, kQuery, kKey, kValue, kOutput, kConstValue };

Tensor2D gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, CounterRng rng) {
  Tensor2D m(rows, cols);
  auto d = m.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = stddev * rng.normal(i);
  return m;
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2 (one id is the mask)");
  if (num_layers == 0 || num_heads == 0 || head_dim == 0) {
    throw ConfigError("layers, heads and head_dim must all be positive");
  }
}

SyntheticModel::SyntheticModel(ModelConfig config) : config_(config) {
  config_.validate();
  const std::size_t d = model_dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const auto seed = config_.seed;

  embedding_ = gaussian_matrix(config_.vocab_size, d, 1.0, CounterRng({seed, kEmbed}));
  heads_.reserve(config_.num_layers * config_.num_heads);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    for (std::size_t h = 0; h < config_.num_heads; ++h) {
      HeadWeights w;
      w.wq = gaussian_matrix(d, config_.head_dim, config_.qk_gain * inv_sqrt_d,
                             CounterRng({seed, kQuery, l, h}));
      w.wk = gaussian_matrix(d, config_.head_dim, config_.qk_gain * inv_sqrt_d,
                             CounterRng({seed, kKey, l, h}));
      w.wv = gaussian_matrix(d, config_.head_dim, inv_sqrt_d, CounterRng({seed, kValue, l, h}));
      CounterRng cv({seed, kConstValue, l, h});
      w.constant_value.resize(config_.head_dim);
      for (std::size_t c = 0; c < config_.head_dim; ++c) w.constant_value[c] = cv.normal(c);
      heads_.push_back(std::move(w));
    }
    out_proj_.push_back(gaussian_matrix(d, d, inv_sqrt_d, CounterRng({seed, kOutput, l})));
  }
  fixtures_.resize(heads_.size());
}

std::size_t SyntheticModel::head_index(std::size_t layer, std::size_t head) const {
  if (layer >= config_.num_layers || head >= config_.num_heads) {
    throw BoundsError("model has no head (" + std::to_string(layer) + ", " +
                      std::to_string(head) + ")");
  }
  return layer * config_.num_heads + head;
}

Tensor2D SyntheticModel::embed(std::span<const TokenId> ids, std::size_t first_position) const {
  const std::size_t d = model_dim();
  Tensor2D hidden(ids.size(), d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= config_.vocab_size) {
      throw BoundsError("token id " + std::to_string(ids[r]) + " outside vocabulary");
    }
    auto src = embedding_.row(static_cast<std::size_t>(ids[r]));
    auto dst = hidden.row(r);
    std::copy(src.begin(), src.end(), dst.begin());
    if (config_.positional) {
      const double pos = static_cast<double>(first_position + r);
      for (std::size_t c = 0; c < d; c += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(c) / static_cast<double>(d));
        dst[c] += std::sin(pos * freq);
        if (c + 1 < d) dst[c + 1] += std::cos(pos * freq);
      }
    }
  }
  return hidden;
}

Tensor2D SyntheticModel::normalize(const Tensor2D& hidden) const {
  Tensor2D out(hidden.rows(), hidden.cols());
  for (std::size_t r = 0; r < hidden.rows(); ++r) {
    auto src = hidden.row(r);
    double ss = 0.0;
    for (double x : src) ss += x * x;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(src.size()) + 1e-6);
    auto dst = out.row(r);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] = src[c] * inv;
  }
  return out;
}

HeadProjections SyntheticModel::project(std::size_t layer, std::size_t head,
                                        const Tensor2D& normed) const {
  const auto idx = head_index(layer, head);
  const auto& w = heads_[idx];
  HeadProjections p{matmul(normed, w.wq), matmul(normed, w.wk), matmul(normed, w.wv)};
  if (fixtures_[idx].constant_values) {
    for (std::size_t r = 0; r < p.v.rows(); ++r) {
      std::copy(w.constant_value.begin(), w.constant_value.end(), p.v.row(r).begin());
    }
  }
  return p;
}

void SyntheticModel::add_attention_output(std::size_t layer,
                                          std::span<const Tensor2D> head_outputs,
                                          Tensor2D& hidden) const {
  if (head_outputs.size() != config_.num_heads) throw ShapeError("expected one output per head");
  const std::size_t d = model_dim();
  Tensor2D concat(hidden.rows(), d);
  for (std::size_t h = 0; h < head_outputs.size(); ++h) {
    const auto& o = head_outputs[h];
    if (o.rows() != hidden.rows() || o.cols() != config_.head_dim) {
      throw ShapeError("head output shape mismatch");
    }
    for (std::size_t r = 0; r < o.rows(); ++r) {
      std::copy(o.row(r).begin(), o.row(r).end(), concat.row(r).begin() + h * config_.head_dim);
    }
  }
  const auto delta = matmul(concat, out_proj_.at(layer));
  auto hd = hidden.data();
  auto dd = delta.data();
  for (std::size_t i = 0; i < hd.size(); ++i) hd[i] += dd[i];
}

Tensor2D SyntheticModel::logits(const Tensor2D& hidden) const {
  const auto normed = normalize(hidden);
  const double gain = config_.logit_gain / std::sqrt(static_cast<double>(model_dim()));
  Tensor2D out(hidden.rows(), config_.vocab_size);
  for (std::size_t r = 0; r < normed.rows(); ++r) {
    for (std::size_t t = 0; t < config_.vocab_size; ++t) {
      out(r, t) = gain * dot(normed.row(r), embedding_.row(t));
    }
  }
  return out;
}

void SyntheticModel::set_head_fixture(std::size_t layer, std::size_t head,
                                      const HeadFixture& fixture) {
  fixtures_[head_index(layer, head)] = fixture;
}

const HeadFixture& SyntheticModel::head_fixture(std::size_t layer, std::size_t head) const {
  return fixtures_[head_index(layer, head)];
}

}  // namespace flashblock
