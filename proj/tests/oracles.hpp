// Copyright 2026 The lowbit-attn Authors
// SPDX-License-Identifier: Apache-2.0

// Straightforward re-implementations used as test oracles. They share no
// code with the library: values come from bit-field formulas or literal
// tables, rounding is an exhaustive nearest search, and products are plain
// triple loops.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "lowbit_attn/tensor.hpp"

namespace oracle {

using lowbit_attn::Tensor;

// Non-negative E2M1 values, indexed by code.
inline constexpr std::array<double, 8> kE2M1 = {0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0};

inline double e2m1_value(std::uint8_t bits) {
  const double mag = kE2M1[bits & 0x7];
  return (bits & 0x8) ? -mag : mag;
}

inline double e4m3_value(std::uint8_t bits) {
  if ((bits & 0x7F) == 0x7F) return std::numeric_limits<double>::quiet_NaN();
  const int e = (bits >> 3) & 0xF;
  const int m = bits & 0x7;
  const double mag = e == 0 ? (m / 8.0) * std::pow(2.0, -6) : (1.0 + m / 8.0) * std::pow(2.0, e - 7);
  return (bits & 0x80) ? -mag : mag;
}

// Nearest code among non-negative codes [0, max_code]; on a tie the even
// code wins. Magnitudes past the largest value saturate.
template <typename ValueOf>
std::uint8_t nearest_magnitude_code(double mag, int max_code, ValueOf value_of) {
  int best = 0;
  double best_err = std::numeric_limits<double>::infinity();
  for (int c = 0; c <= max_code; ++c) {
    const double err = std::fabs(mag - value_of(static_cast<std::uint8_t>(c)));
    if (err < best_err || (err == best_err && c % 2 == 0)) {
      best = c;
      best_err = err;
    }
  }
  return static_cast<std::uint8_t>(best);
}

inline std::uint8_t e2m1_encode(double v) {
  const std::uint8_t mag = nearest_magnitude_code(std::fabs(v), 7, [](std::uint8_t c) { return kE2M1[c]; });
  return std::signbit(v) ? static_cast<std::uint8_t>(mag | 0x8) : mag;
}

inline std::uint8_t e4m3_encode(double v) {
  const std::uint8_t mag = nearest_magnitude_code(std::fabs(v), 0x7E, e4m3_value);
  return std::signbit(v) ? static_cast<std::uint8_t>(mag | 0x80) : mag;
}

// Smallest 2^k >= v for k in [-127, 127], by walking the exponents.
inline std::uint8_t e8m0_round_up(double v) {
  for (int k = -127; k < 127; ++k) {
    if (std::ldexp(1.0, k) >= v) return static_cast<std::uint8_t>(k + 127);
  }
  return 254;
}

inline double e8m0_value(std::uint8_t bits) { return std::ldexp(1.0, bits - 127); }

// One block of microscaling quantization, dequantized. `e4m3` selects the
// E4M3 (nearest) or E8M0 (round up) scale.
inline std::vector<float> microscale_block(const std::vector<float>& x, bool e4m3) {
  double amax = 0.0;
  for (float v : x) amax = std::max(amax, std::fabs(static_cast<double>(v)));
  const float raw = static_cast<float>(amax) / 6.0f;
  float scale = 0.0f;
  if (e4m3) {
    scale = amax == 0.0 ? static_cast<float>(e4m3_value(0x01))
                        : static_cast<float>(e4m3_value(e4m3_encode(raw)));
  } else {
    scale = amax == 0.0 ? static_cast<float>(e8m0_value(0))
                        : static_cast<float>(e8m0_value(e8m0_round_up(raw)));
  }
  std::vector<float> out(x.size(), 0.0f);
  if (scale == 0.0f) return out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = scale * static_cast<float>(e2m1_value(e2m1_encode(x[i] / scale)));
  }
  return out;
}

// Row-wise microscaling with blocks of `n` along the columns, dequantized.
inline Tensor microscale(const Tensor& x, std::size_t n, bool e4m3) {
  Tensor out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t b = 0; b < x.cols(); b += n) {
      std::vector<float> block(x.row(r).begin() + b, x.row(r).begin() + b + n);
      const std::vector<float> q = microscale_block(block, e4m3);
      for (std::size_t k = 0; k < n; ++k) out(r, b + k) = q[k];
    }
  }
  return out;
}

// C = A B with one FP32 accumulator per output, summed over k in order.
inline Tensor triple_loop(const Tensor& a, const Tensor& b) {
  Tensor c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      float acc = 0.0f;
      for (std::size_t k = 0; k < a.cols(); ++k) acc = acc + a(i, k) * b(k, j);
      c(i, j) = acc;
    }
  }
  return c;
}

// Plain softmax attention in double.
inline lowbit_attn::Matrix<double> attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                             bool apply_sm_scale = true) {
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols();
  const double scale = apply_sm_scale ? 1.0 / std::sqrt(static_cast<double>(d)) : 1.0;
  lowbit_attn::Matrix<double> o(n, v.cols());
  std::vector<double> s(m);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += static_cast<double>(q(i, c)) * k(j, c);
      s[j] = acc * scale;
      mx = std::max(mx, s[j]);
    }
    double sum = 0.0;
    for (double& x : s) {
      x = std::exp(x - mx);
      sum += x;
    }
    for (std::size_t c = 0; c < v.cols(); ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += s[j] * v(j, c);
      o(i, c) = acc / sum;
    }
  }
  return o;
}

}  // namespace oracle
