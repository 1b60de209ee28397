// Copyright 2026 The lowbit-attn Authors
// SPDX-License-Identifier: Apache-2.0

// FP4 inference attention: a direct softmax reference, the tiled
// online-softmax engine, and the microscaled forward pass with smoothing of
// K and Q plus two-level quantization of the probabilities.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lowbit_attn/matmul.hpp"
#include "lowbit_attn/parallel.hpp"
#include "lowbit_attn/quantizers.hpp"
#include "lowbit_attn/tensor.hpp"

namespace lowbit_attn {

enum class QuantMode : std::uint8_t { kFullPrecision, kNVFP4, kMXFP4 };
enum class PScaleMode : std::uint8_t { kDirect, kTwoLevel };

inline const char* to_string(QuantMode q) {
  switch (q) {
    case QuantMode::kFullPrecision: return "fp";
    case QuantMode::kNVFP4: return "nvfp4";
    case QuantMode::kMXFP4: return "mxfp4";
  }
  return "?";
}

inline const char* to_string(PScaleMode p) {
  return p == PScaleMode::kDirect ? "direct" : "twolevel";
}

inline Microscaling microscaling_of(QuantMode q) {
  if (q == QuantMode::kFullPrecision) {
    throw std::invalid_argument("full precision has no microscaling format");
  }
  return q == QuantMode::kNVFP4 ? Microscaling::kNVFP4 : Microscaling::kMXFP4;
}

/// Tiling and quantization settings shared by the inference and training
/// paths. The training path ignores `quant`, `p_scale` and `smooth_q`.
struct AttentionConfig {
  std::size_t block_q = 64;
  std::size_t block_kv = 64;
  QuantMode quant = QuantMode::kNVFP4;
  PScaleMode p_scale = PScaleMode::kTwoLevel;
  bool smooth_k = true;
  bool smooth_q = true;
  // Multiply S by 1/sqrt(d) after the QK^T product.
  bool apply_sm_scale = true;

  void validate(std::size_t n, std::size_t d) const {
    if (n == 0 || d == 0) throw std::invalid_argument("attention: empty sequence or head dim");
    if (block_q == 0 || block_kv == 0) throw std::invalid_argument("attention: zero tile size");
    if (n % block_q != 0 || n % block_kv != 0) {
      throw std::invalid_argument("attention: N=" + std::to_string(n) +
                                  " not divisible by tiles B_q=" + std::to_string(block_q) +
                                  ", B_kv=" + std::to_string(block_kv));
    }
    if (quant != QuantMode::kFullPrecision) {
      const std::size_t w = block_width(microscaling_of(quant));
      // Q and K are blocked along d, P and V^T along the key dimension.
      if (d % w != 0 || block_kv % w != 0) {
        throw std::invalid_argument("attention: d and B_kv must be multiples of " +
                                    std::to_string(w) + " for " + to_string(quant));
      }
    }
  }
};

template <typename T = float>
T softmax_scale(std::size_t d, bool apply) {
  return apply ? T{1} / std::sqrt(static_cast<T>(d)) : T{1};
}

inline void require_qkv(const char* who, const auto& q, const auto& k, const auto& v) {
  if (!q.same_shape(k) || !q.same_shape(v)) {
    throw std::invalid_argument(std::string(who) + ": Q, K, V shapes differ (" +
                                shape_string(q) + ", " + shape_string(k) + ", " +
                                shape_string(v) + ")");
  }
  if (q.rows() == 0 || q.cols() == 0) {
    throw std::invalid_argument(std::string(who) + ": empty input");
  }
}

/// Per-column mean (accumulated in double).
inline std::vector<float> column_mean(const Tensor& x) {
  std::vector<double> acc(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    for (std::size_t c = 0; c < x.cols(); ++c) acc[c] += row[c];
  }
  std::vector<float> mean(x.cols());
  for (std::size_t c = 0; c < x.cols(); ++c) {
    mean[c] = static_cast<float>(acc[c] / static_cast<double>(x.rows()));
  }
  return mean;
}

inline Tensor subtract_row_vector(const Tensor& x, std::span<const float> v) {
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] -= v[c];
  }
  return out;
}

/// softmax(scale * Q K^T) V computed directly, with max subtraction.
template <typename T>
Matrix<T> reference_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                              bool apply_sm_scale = true) {
  require_qkv("reference_attention", q, k, v);
  const T scale = softmax_scale<T>(q.cols(), apply_sm_scale);
  Matrix<T> s = matmul(q, k.transposed());
  for (std::size_t r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    T mx = -std::numeric_limits<T>::infinity();
    for (T& x : row) {
      x *= scale;
      mx = std::max(mx, x);
    }
    T sum = 0;
    for (T& x : row) {
      x = std::exp(x - mx);
      sum += x;
    }
    for (T& x : row) x /= sum;
  }
  return matmul(s, v);
}

// ---------------------------------------------------------------------------
// Online softmax

/// Running row max m, running denominator l and unnormalised output for one
/// query tile.
struct OnlineSoftmaxState {
  std::vector<float> m;
  std::vector<float> l;
  Tensor o_acc;

  OnlineSoftmaxState(std::size_t rows, std::size_t d)
      : m(rows, -std::numeric_limits<float>::infinity()), l(rows, 0.0f), o_acc(rows, d) {}

  /// diag(l)^-1 * O.
  Tensor finalize() const {
    Tensor out = o_acc;
    for (std::size_t r = 0; r < out.rows(); ++r) {
      for (float& x : out.row(r)) x /= l[r];
    }
    return out;
  }

  /// Per-row m + log(l).
  std::vector<float> logsumexp() const {
    std::vector<float> out(m.size());
    for (std::size_t r = 0; r < m.size(); ++r) out[r] = m[r] + std::log(l[r]);
    return out;
  }
};

struct SoftmaxTile {
  Tensor p;                     // exp(S - m_new), in [0, 1]
  std::vector<float> rowmax_s;  // rowmax of the incoming S tile
};

/// One key tile of the online softmax:
///   m' = max(m, rowmax(S)), P = exp(S - m'), l' = e^(m - m') l + rowsum(P),
/// and O is rescaled by e^(m - m'). The caller adds P V into o_acc.
inline SoftmaxTile online_softmax_step(OnlineSoftmaxState& state, const Tensor& s) {
  if (s.rows() != state.m.size()) {
    throw std::invalid_argument("online_softmax_step: tile has " + std::to_string(s.rows()) +
                                " rows, state has " + std::to_string(state.m.size()));
  }
  SoftmaxTile tile{Tensor(s.rows(), s.cols()), std::vector<float>(s.rows())};
  for (std::size_t r = 0; r < s.rows(); ++r) {
    const auto srow = s.row(r);
    float rowmax = -std::numeric_limits<float>::infinity();
    for (float x : srow) rowmax = std::max(rowmax, x);
    const float m_new = std::max(state.m[r], rowmax);
    const float alpha = std::exp(state.m[r] - m_new);
    auto prow = tile.p.row(r);
    float rowsum = 0.0f;
    for (std::size_t c = 0; c < srow.size(); ++c) {
      prow[c] = std::exp(srow[c] - m_new);
      rowsum += prow[c];
    }
    state.l[r] = alpha * state.l[r] + rowsum;
    for (float& o : state.o_acc.row(r)) o *= alpha;
    state.m[r] = m_new;
    tile.rowmax_s[r] = rowmax;
  }
  return tile;
}

inline void add_into(Tensor& acc, const Tensor& x) {
  float* a = acc.data();
  const float* b = x.data();
  for (std::size_t i = 0; i < acc.size(); ++i) a[i] += b[i];
}

// ---------------------------------------------------------------------------
// Microscaled FP4 forward

/// Tiled attention with FP4 microscaled QK^T and PV products.
///
/// K is centred by its per-column mean over the whole sequence (smooth_k).
/// Each query tile is centred by its own column mean qbar (smooth_q) before
/// quantization; qbar K_j^T is added back to every row of S in full
/// precision. P is quantized directly or with two-level scaling. With
/// QuantMode::kFullPrecision the same tiling runs without quantization.
inline Tensor sageattention3_forward(const Tensor& q, const Tensor& k, const Tensor& v,
                                     const AttentionConfig& cfg = {}) {
  require_qkv("sageattention3_forward", q, k, v);
  const std::size_t n = q.rows();
  const std::size_t d = q.cols();
  cfg.validate(n, d);
  const bool quantized = cfg.quant != QuantMode::kFullPrecision;
  const float scale = softmax_scale(d, cfg.apply_sm_scale);
  const std::size_t tiles_q = n / cfg.block_q;
  const std::size_t tiles_kv = n / cfg.block_kv;

  const Tensor ks = cfg.smooth_k ? subtract_row_vector(k, column_mean(k)) : k;

  // K and V are quantized once per key tile and shared by every query tile.
  std::vector<Tensor> kt_tiles(tiles_kv);
  std::vector<Tensor> v_tiles(tiles_kv);
  std::vector<MicroscaledMatrix> k_hat(quantized ? tiles_kv : 0);
  std::vector<MicroscaledMatrix> vt_hat(quantized ? tiles_kv : 0);
  for (std::size_t j = 0; j < tiles_kv; ++j) {
    const Tensor kj = ks.row_block(j * cfg.block_kv, cfg.block_kv);
    kt_tiles[j] = kj.transposed();
    v_tiles[j] = v.row_block(j * cfg.block_kv, cfg.block_kv);
    if (quantized) {
      const Microscaling fmt = microscaling_of(cfg.quant);
      k_hat[j] = phi(kj, fmt);
      vt_hat[j] = phi(v_tiles[j].transposed(), fmt);
    }
  }

  Tensor out(n, d);
  parallel_for(tiles_q, [&](std::size_t i) {
    const Tensor qi = q.row_block(i * cfg.block_q, cfg.block_q);
    const std::vector<float> qbar = cfg.smooth_q ? column_mean(qi) : std::vector<float>(d, 0.0f);
    const Tensor qc = cfg.smooth_q ? subtract_row_vector(qi, qbar) : qi;
    MicroscaledMatrix q_hat;
    if (quantized) q_hat = phi(qc, microscaling_of(cfg.quant));

    OnlineSoftmaxState state(cfg.block_q, d);
    for (std::size_t j = 0; j < tiles_kv; ++j) {
      Tensor s = quantized ? fp4mm(q_hat, k_hat[j]) : matmul_fp(qc, kt_tiles[j]);
      if (cfg.smooth_q) {
        const std::vector<float> correction = gemv_row(qbar, kt_tiles[j]);
        for (std::size_t r = 0; r < s.rows(); ++r) {
          auto row = s.row(r);
          for (std::size_t c = 0; c < row.size(); ++c) row[c] += correction[c];
        }
      }
      if (scale != 1.0f) {
        for (float& x : s.values()) x *= scale;
      }

      const SoftmaxTile tile = online_softmax_step(state, s);
      if (!quantized) {
        add_into(state.o_acc, matmul_fp(tile.p, v_tiles[j]));
      } else if (cfg.p_scale == PScaleMode::kTwoLevel) {
        const TwoLevelP p_hat = two_level_quantize(tile.p, microscaling_of(cfg.quant));
        const Tensor pv = fp4mm(p_hat.inner, vt_hat[j]);
        for (std::size_t r = 0; r < pv.rows(); ++r) {
          auto acc = state.o_acc.row(r);
          const auto src = pv.row(r);
          for (std::size_t c = 0; c < d; ++c) acc[c] += src[c] * p_hat.s_p1[r];
        }
      } else {
        add_into(state.o_acc, fp4mm(phi(tile.p, microscaling_of(cfg.quant)), vt_hat[j]));
      }
    }
    out.set_row_block(i * cfg.block_q, state.finalize());
  });
  return out;
}

}  // namespace lowbit_attn
