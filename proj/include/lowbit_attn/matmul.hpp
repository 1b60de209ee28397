// Copyright 2026 The lowbit-attn Authors
// SPDX-License-Identifier: Apache-2.0

// Reference semantics for the matmul primitives. Every output element is a
// plain left-to-right sum over the reduction index starting from zero, in
// the accumulator's precision, so results are reproducible bit for bit.

#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lowbit_attn/quantizers.hpp"
#include "lowbit_attn/tensor.hpp"

namespace lowbit_attn {

/// C = A * B. Loops are ordered i-k-j so each C(i, j) still accumulates
/// over k in increasing order.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_string(a) + " * " +
                                shape_string(b));
  }
  Matrix<T> c(a.rows(), b.cols(), T{0});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* out = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      const T* brow = b.row(k).data();
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

/// Full-precision (FP32) matmul.
inline Tensor matmul_fp(const Tensor& a, const Tensor& b) { return matmul(a, b); }

/// FP4 microscaled matmul: phi_inv(A) * phi_inv(Bt)^T with FP32
/// accumulation. Both operands carry their blocks along the reduction
/// dimension, so the second operand is passed transposed (N x K).
inline Tensor fp4mm(const MicroscaledMatrix& a, const MicroscaledMatrix& b_t) {
  if (a.cols() != b_t.cols()) {
    throw std::invalid_argument("fp4mm: reduction mismatch " + shape_string(a.rows(), a.cols()) +
                                " vs " + shape_string(b_t.rows(), b_t.cols()) + " (transposed)");
  }
  if (a.block_width() != b_t.block_width()) {
    throw std::invalid_argument("fp4mm: block width mismatch");
  }
  return matmul_fp(phi_inv(a), phi_inv(b_t).transposed());
}

// Widest reduction for which |sum| <= 127^2 * K stays below 2^23, so the
// integer accumulator converts to FP32 without rounding.
inline constexpr std::size_t kInt8MaxReduction = (std::size_t{1} << 23) / (127 * 127);

namespace detail {

// Integer products of row-major A (m x k) and B (k x n); epilogue(i, j, acc)
// receives each exact accumulator.
template <typename Epilogue>
void int8_accumulate(const std::int8_t* a, const std::int8_t* b, std::size_t m, std::size_t k,
                     std::size_t n, Epilogue&& epilogue) {
  if (k > kInt8MaxReduction) {
    throw std::invalid_argument("int8_mm: reduction length " + std::to_string(k) +
                                " exceeds exact-accumulation limit");
  }
  std::vector<std::int32_t> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0);
    for (std::size_t kk = 0; kk < k; ++kk) {
      const std::int32_t aik = a[i * k + kk];
      const std::int8_t* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += aik * brow[j];
    }
    for (std::size_t j = 0; j < n; ++j) epilogue(i, j, acc[j]);
  }
}

}  // namespace detail

/// INT8 block matmul: exact integer inner products, then * s_A * s_B.
inline Tensor int8_mm(const BlockQuantizedInt8& a, const BlockQuantizedInt8& b) {
  if (a.cols != b.rows) {
    throw std::invalid_argument("int8_mm: shape mismatch " + shape_string(a.rows, a.cols) +
                                " * " + shape_string(b.rows, b.cols));
  }
  Tensor c(a.rows, b.cols);
  detail::int8_accumulate(a.codes.data(), b.codes.data(), a.rows, a.cols, b.cols,
                          [&](std::size_t i, std::size_t j, std::int32_t acc) {
                            c(i, j) = static_cast<float>(acc) * a.scale * b.scale;
                          });
  return c;
}

/// Per-token P times a per-block V: exact integer products, then
/// * s_P[row] * s_V.
inline Tensor int8_mm(const PerTokenQuantizedInt8& p, const BlockQuantizedInt8& v) {
  if (p.cols != v.rows) {
    throw std::invalid_argument("int8_mm: shape mismatch " + shape_string(p.rows, p.cols) +
                                " * " + shape_string(v.rows, v.cols));
  }
  Tensor c(p.rows, v.cols);
  detail::int8_accumulate(p.codes.data(), v.codes.data(), p.rows, p.cols, v.cols,
                          [&](std::size_t i, std::size_t j, std::int32_t acc) {
                            c(i, j) = static_cast<float>(acc) * p.row_scales[i] * v.scale;
                          });
  return c;
}

/// Row vector times matrix: out[j] = sum_c qbar[c] * kt(c, j).
inline std::vector<float> gemv_row(std::span<const float> qbar, const Tensor& kt) {
  if (qbar.size() != kt.rows()) {
    throw std::invalid_argument("gemv_row: vector length " + std::to_string(qbar.size()) +
                                " vs matrix " + shape_string(kt));
  }
  std::vector<float> out(kt.cols(), 0.0f);
  for (std::size_t c = 0; c < kt.rows(); ++c) {
    const auto krow = kt.row(c);
    for (std::size_t j = 0; j < kt.cols(); ++j) out[j] += qbar[c] * krow[j];
  }
  return out;
}

}  // namespace lowbit_attn
