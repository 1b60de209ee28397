// Copyright 2026 The lowbit-attn Authors
// SPDX-License-Identifier: Apache-2.0

// Seeded synthetic attention inputs. The generator is hand-rolled on top of
// std::mt19937_64 (whose output sequence is fixed by the standard) so the
// same seed yields the same tensors with any standard library.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lowbit_attn/tensor.hpp"

namespace lowbit_attn {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 == 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return engine_() % n; }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

enum class Distribution : std::uint8_t { kGaussian, kGaussianOutlierChannels, kSoftmaxLogits };

inline const char* to_string(Distribution d) {
  switch (d) {
    case Distribution::kGaussian: return "gaussian";
    case Distribution::kGaussianOutlierChannels: return "outlier";
    case Distribution::kSoftmaxLogits: return "softmax";
  }
  return "?";
}

/// Q, K, V, dO have i.i.d. N(0, 1) entries plus a per-channel offset shared
/// by all tokens of the tensor, N(0, channel_bias^2) for Q and K and
/// N(0, value_bias^2) for V and dO.
/// kGaussianOutlierChannels multiplies `outlier_channels` randomly chosen
/// columns of K by `outlier_scale`. kSoftmaxLogits multiplies Q by
/// `logit_scale` to sharpen the attention rows.
struct SyntheticSpec {
  Distribution distribution = Distribution::kGaussianOutlierChannels;
  std::size_t n = 1024;
  std::size_t d = 64;
  std::size_t outlier_channels = 4;
  float outlier_scale = 20.0f;
  float channel_bias = 1.0f;
  float value_bias = 0.0f;
  float logit_scale = 1.0f;
  std::uint64_t seed = 1;

  void validate() const {
    if (n == 0 || d == 0) throw std::invalid_argument("synthetic: n and d must be positive");
    if (distribution == Distribution::kGaussianOutlierChannels && outlier_channels > d) {
      throw std::invalid_argument("synthetic: more outlier channels than d");
    }
    if (!(std::isfinite(outlier_scale) && outlier_scale > 0.0f)) {
      throw std::invalid_argument("synthetic: outlier_scale must be positive");
    }
    if (!(std::isfinite(channel_bias) && channel_bias >= 0.0f)) {
      throw std::invalid_argument("synthetic: channel_bias must be non-negative");
    }
    if (!(std::isfinite(value_bias) && value_bias >= 0.0f)) {
      throw std::invalid_argument("synthetic: value_bias must be non-negative");
    }
    if (!(std::isfinite(logit_scale) && logit_scale > 0.0f)) {
      throw std::invalid_argument("synthetic: logit_scale must be positive");
    }
  }
};

struct SyntheticTensors {
  Tensor q, k, v, d_o;
};

inline Tensor gaussian_tensor(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t(rows, cols);
  for (float& x : t.values()) x = static_cast<float>(rng.normal());
  return t;
}

inline SyntheticTensors generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  SyntheticTensors out{gaussian_tensor(spec.n, spec.d, rng), gaussian_tensor(spec.n, spec.d, rng),
                       gaussian_tensor(spec.n, spec.d, rng), gaussian_tensor(spec.n, spec.d, rng)};
  std::vector<float> q_bias(spec.d), k_bias(spec.d), v_bias(spec.d), do_bias(spec.d);
  for (float& b : q_bias) b = static_cast<float>(rng.normal()) * spec.channel_bias;
  for (float& b : k_bias) b = static_cast<float>(rng.normal()) * spec.channel_bias;
  for (float& b : v_bias) b = static_cast<float>(rng.normal()) * spec.value_bias;
  for (float& b : do_bias) b = static_cast<float>(rng.normal()) * spec.value_bias;

  // Partial Fisher-Yates; drawn for every distribution so the streams of the
  // variants stay aligned.
  std::vector<std::size_t> channels(spec.d);
  for (std::size_t c = 0; c < spec.d; ++c) channels[c] = c;
  const std::size_t picked = std::min(spec.outlier_channels, spec.d);
  for (std::size_t c = 0; c < picked; ++c) {
    std::swap(channels[c], channels[c + rng.below(spec.d - c)]);
  }
  std::vector<float> k_mult(spec.d, 1.0f);
  if (spec.distribution == Distribution::kGaussianOutlierChannels) {
    for (std::size_t c = 0; c < picked; ++c) k_mult[channels[c]] = spec.outlier_scale;
  }
  const float q_mult = spec.distribution == Distribution::kSoftmaxLogits ? spec.logit_scale : 1.0f;

  for (std::size_t r = 0; r < spec.n; ++r) {
    auto q = out.q.row(r);
    auto k = out.k.row(r);
    auto v = out.v.row(r);
    auto d_o = out.d_o.row(r);
    for (std::size_t c = 0; c < spec.d; ++c) {
      q[c] = (q[c] + q_bias[c]) * q_mult;
      k[c] = (k[c] + k_bias[c]) * k_mult[c];
      v[c] += v_bias[c];
      d_o[c] += do_bias[c];
    }
  }
  return out;
}

/// Rows shaped like online-softmax output: exp(z - rowmax(z)) with
/// z ~ N(0, logit_scale^2), so every row peaks at exactly 1.
inline Tensor softmax_rows(std::size_t rows, std::size_t cols, float logit_scale, Rng& rng) {
  Tensor p(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = p.row(r);
    float mx = -std::numeric_limits<float>::infinity();
    for (float& x : row) {
      x = static_cast<float>(rng.normal()) * logit_scale;
      mx = std::max(mx, x);
    }
    for (float& x : row) x = std::exp(x - mx);
  }
  return p;
}

}  // namespace lowbit_attn
