#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "flashblock/errors.hpp"

namespace flashblock {

/// Row-major dense matrix. The scalar type picks the precision: `Tensor2D`
/// (64-bit) is the oracle precision, `Tensor2Df` (32-bit) the production path.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Tensor(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("tensor buffer holds " + std::to_string(data_.size()) +
                       " values, expected " + std::to_string(rows_ * cols_));
    }
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged row list");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(r, c, std::move(data));
  }

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  /// Copy of rows [begin, end).
  [[nodiscard]] Tensor slice_rows(std::size_t begin, std::size_t end) const {
    if (begin > end || end > rows_) {
      throw BoundsError("row slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                        ") outside " + std::to_string(rows_) + " rows");
    }
    return Tensor(end - begin, cols_,
                  std::vector<T>(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
                                 data_.begin() + static_cast<std::ptrdiff_t>(end * cols_)));
  }

  /// Appends the rows of `other`. An empty tensor adopts `other`'s width.
  void append_rows(const Tensor& other) {
    if (rows_ == 0 && cols_ == 0) cols_ = other.cols_;
    if (other.cols_ != cols_) throw ShapeError("append_rows: column count mismatch");
    data_.insert(data_.end(), other.data_.begin(), other.data_.end());
    rows_ += other.rows_;
  }

  void reserve_rows(std::size_t rows) { data_.reserve(rows * cols_); }

  template <typename U>
  [[nodiscard]] Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(rows_, cols_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Tensor2D = Tensor<double>;
using Tensor2Df = Tensor<float>;

/// Largest elementwise |a - b|, evaluated in 64-bit. Shapes must agree.
template <typename A, typename B>
double max_abs_diff(const Tensor<A>& a, const Tensor<B>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("max_abs_diff: shape mismatch");
  }
  double worst = 0.0;
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(ad[i]) - static_cast<double>(bd[i])));
  }
  return worst;
}

/// Mean elementwise |a - b| (the L1 gap convention used by the sparse experiments).
template <typename A, typename B>
double mean_abs_diff(const Tensor<A>& a, const Tensor<B>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("mean_abs_diff: shape mismatch");
  }
  if (a.size() == 0) return 0.0;
  double total = 0.0;
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) {
    total += std::abs(static_cast<double>(ad[i]) - static_cast<double>(bd[i]));
  }
  return total / static_cast<double>(ad.size());
}

}  // namespace flashblock
