#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>

#include "flashblock/tensor.hpp"

namespace flashblock {

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  T acc{0};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Tensor<T> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

/// Row-wise softmax with per-row max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& scores) {
  Tensor<T> out(scores.rows(), scores.cols());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    auto in = scores.row(i);
    auto dst = out.row(i);
    if (in.empty()) continue;
    const T mx = *std::max_element(in.begin(), in.end());
    T sum{0};
    for (std::size_t j = 0; j < in.size(); ++j) {
      dst[j] = std::exp(in[j] - mx);
      sum += dst[j];
    }
    for (auto& v : dst) v /= sum;
  }
  return out;
}

/// Cosine similarity; 0 when either vector has norm below 1e-12.
template <typename T>
T cosine_similarity(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size()) throw ShapeError("cosine_similarity: length mismatch");
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += static_cast<double>(u[i]) * static_cast<double>(v[i]);
    uu += static_cast<double>(u[i]) * static_cast<double>(u[i]);
    vv += static_cast<double>(v[i]) * static_cast<double>(v[i]);
  }
  const double nu = std::sqrt(uu);
  const double nv = std::sqrt(vv);
  if (nu < 1e-12 || nv < 1e-12) return T{0};
  return static_cast<T>(std::clamp(uv / (nu * nv), -1.0, 1.0));
}

}  // namespace flashblock
