// Copyright 2026 The lowbit-attn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lowbit_attn {

/// Dense row-major matrix with an explicit shape.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
      throw std::invalid_argument("Matrix: data size does not match shape");
    }
  }

  template <typename U>
  static Matrix cast_from(const Matrix<U>& other) {
    Matrix out(other.rows(), other.cols());
    for (std::size_t i = 0; i < other.size(); ++i) {
      out.data_[i] = static_cast<T>(other.data()[i]);
    }
    return out;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  bool same_shape(const Matrix& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  /// Copy of rows [first, first + count).
  Matrix row_block(std::size_t first, std::size_t count) const {
    if (first + count > rows_) throw std::out_of_range("Matrix::row_block");
    Matrix out(count, cols_);
    std::copy(data_.begin() + first * cols_, data_.begin() + (first + count) * cols_,
              out.data_.begin());
    return out;
  }

  void set_row_block(std::size_t first, const Matrix& block) {
    if (block.cols_ != cols_ || first + block.rows_ > rows_) {
      throw std::out_of_range("Matrix::set_row_block");
    }
    std::copy(block.data_.begin(), block.data_.end(), data_.begin() + first * cols_);
  }

  Matrix transposed() const {
    Matrix out(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
      for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
    }
    return out;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

/// Working-precision tensor (32-bit IEEE).
using Tensor = Matrix<float>;

inline std::string shape_string(std::size_t rows, std::size_t cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename T>
std::string shape_string(const Matrix<T>& m) {
  return shape_string(m.rows(), m.cols());
}

}  // namespace lowbit_attn
