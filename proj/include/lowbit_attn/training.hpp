// Copyright 2026 The lowbit-attn Authors
// SPDX-License-Identifier: Apache-2.0

// Trainable INT8 attention: tiled forward producing O and the per-row
// logsumexp, and the tiled backward with five matmuls of which dO V^T stays
// in full precision. A full-precision analytic backward and a
// finite-difference checker serve as oracles.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lowbit_attn/inference.hpp"
#include "lowbit_attn/matmul.hpp"
#include "lowbit_attn/parallel.hpp"
#include "lowbit_attn/quantizers.hpp"
#include "lowbit_attn/tensor.hpp"

namespace lowbit_attn {

/// Per-block INT8 quantization of every matmul operand (psi), with
/// per-token INT8 for the forward probabilities.
struct Int8Blocks {
  using Block = BlockQuantizedInt8;

  static Block quantize(const Tensor& x) { return psi(x); }
  static Tensor dequantize(const Block& b) { return lowbit_attn::dequantize(b); }
  static Tensor mm(const Block& a, const Block& b) { return int8_mm(a, b); }
  static Tensor mm_nt(const Block& a, const Block& b) { return int8_mm(a, b.transposed()); }
  static Tensor mm_tn(const Block& a, const Block& b) { return int8_mm(a.transposed(), b); }
  static Tensor pv(const Tensor& p, std::span<const float> rowmax_s,
                   std::span<const float> running_max, const Block& v) {
    return int8_mm(quantize_p_per_token(p, rowmax_s, running_max), v);
  }
};

/// Quantizers replaced by the identity: the same tiled algorithm in FP32.
struct IdentityBlocks {
  using Block = Tensor;

  static Block quantize(const Tensor& x) { return x; }
  static Tensor dequantize(const Block& b) { return b; }
  static Tensor mm(const Block& a, const Block& b) { return matmul_fp(a, b); }
  static Tensor mm_nt(const Block& a, const Block& b) { return matmul_fp(a, b.transposed()); }
  static Tensor mm_tn(const Block& a, const Block& b) { return matmul_fp(a.transposed(), b); }
  static Tensor pv(const Tensor& p, std::span<const float>, std::span<const float>,
                   const Block& v) {
    return matmul_fp(p, v);
  }
};

template <typename T>
struct GradTriple {
  Matrix<T> dq;
  Matrix<T> dk;
  Matrix<T> dv;
};

/// Everything the backward pass needs from the forward pass. Q and K are
/// only available quantized; K is stored after centring by k_mean. V is
/// kept in full precision for the dO V^T product.
template <typename Policy>
struct ForwardSavedState {
  std::vector<typename Policy::Block> q_hat;  // one per query tile
  std::vector<typename Policy::Block> k_hat;  // one per key tile, centred K
  std::vector<typename Policy::Block> v_hat;  // one per key tile
  std::vector<float> k_mean;
  Tensor o;
  std::vector<float> lse;  // m + log(l) per row
  Tensor v;
  std::size_t block_q = 0;
  std::size_t block_kv = 0;
  bool apply_sm_scale = true;
  bool smooth_k = true;
};

/// INT8 forward. Returns the saved state; the attention output is `.o`.
template <typename Policy = Int8Blocks>
ForwardSavedState<Policy> sagebwd_forward(const Tensor& q, const Tensor& k, const Tensor& v,
                                          AttentionConfig cfg = {}) {
  require_qkv("sagebwd_forward", q, k, v);
  const std::size_t n = q.rows();
  const std::size_t d = q.cols();
  cfg.quant = QuantMode::kFullPrecision;  // microscaling constraints do not apply
  cfg.validate(n, d);
  const std::size_t tiles_q = n / cfg.block_q;
  const std::size_t tiles_kv = n / cfg.block_kv;
  const float scale = softmax_scale(d, cfg.apply_sm_scale);

  ForwardSavedState<Policy> st;
  st.block_q = cfg.block_q;
  st.block_kv = cfg.block_kv;
  st.apply_sm_scale = cfg.apply_sm_scale;
  st.smooth_k = cfg.smooth_k;
  st.k_mean = cfg.smooth_k ? column_mean(k) : std::vector<float>(d, 0.0f);
  const Tensor ks = cfg.smooth_k ? subtract_row_vector(k, st.k_mean) : k;
  st.v = v;

  for (std::size_t i = 0; i < tiles_q; ++i) {
    st.q_hat.push_back(Policy::quantize(q.row_block(i * cfg.block_q, cfg.block_q)));
  }
  for (std::size_t j = 0; j < tiles_kv; ++j) {
    // psi(K_j^T) shares its single scale with psi(K_j); only the layout
    // differs, so K_j is stored untransposed.
    st.k_hat.push_back(Policy::quantize(ks.row_block(j * cfg.block_kv, cfg.block_kv)));
    st.v_hat.push_back(Policy::quantize(v.row_block(j * cfg.block_kv, cfg.block_kv)));
  }

  st.o = Tensor(n, d);
  st.lse.assign(n, 0.0f);
  parallel_for(tiles_q, [&](std::size_t i) {
    OnlineSoftmaxState state(cfg.block_q, d);
    for (std::size_t j = 0; j < tiles_kv; ++j) {
      Tensor s = Policy::mm_nt(st.q_hat[i], st.k_hat[j]);
      if (scale != 1.0f) {
        for (float& x : s.values()) x *= scale;
      }
      const SoftmaxTile tile = online_softmax_step(state, s);
      add_into(state.o_acc, Policy::pv(tile.p, tile.rowmax_s, state.m, st.v_hat[j]));
    }
    st.o.set_row_block(i * cfg.block_q, state.finalize());
    const std::vector<float> lse = state.logsumexp();
    std::copy(lse.begin(), lse.end(), st.lse.begin() + i * cfg.block_q);
  });
  return st;
}

enum class DovPrecision : std::uint8_t { kFP16, kINT8 };
enum class DpVSource : std::uint8_t { kOriginal, kDequantized };

inline const char* to_string(DovPrecision p) { return p == DovPrecision::kFP16 ? "fp16" : "int8"; }

struct BackwardOptions {
  // kFP16 keeps dP = dO V^T unquantized (computed in the FP32 working
  // precision); kINT8 runs it through psi like the other four products.
  DovPrecision dov = DovPrecision::kFP16;
  // V used by the unquantized dO V^T product.
  DpVSource v_source = DpVSource::kOriginal;
};

namespace detail {

template <typename Policy>
struct BackwardTile {
  typename Policy::Block p_hat;
  typename Policy::Block ds_hat;
  std::vector<float> ds_rowsum;
};

template <typename Policy>
class BackwardPass {
 public:
  BackwardPass(const ForwardSavedState<Policy>& st, const Tensor& d_o, BackwardOptions opts)
      : st_(st), opts_(opts), d_(st.o.cols()), scale_(softmax_scale(d_, st.apply_sm_scale)) {
    const std::size_t n = st.o.rows();
    delta_.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
      const auto g = d_o.row(r);
      const auto o = st.o.row(r);
      float acc = 0.0f;
      for (std::size_t c = 0; c < d_; ++c) acc += g[c] * o[c];
      delta_[r] = acc;
    }
    for (std::size_t i = 0; i < n / st.block_q; ++i) {
      d_o_tiles_.push_back(d_o.row_block(i * st.block_q, st.block_q));
      d_o_hat_.push_back(Policy::quantize(d_o_tiles_.back()));
    }
    if (opts_.dov == DovPrecision::kFP16) {
      for (std::size_t j = 0; j < n / st.block_kv; ++j) {
        const Tensor vj = opts_.v_source == DpVSource::kOriginal
                              ? st.v.row_block(j * st.block_kv, st.block_kv)
                              : Policy::dequantize(st.v_hat[j]);
        vt_tiles_.push_back(vj.transposed());
      }
    }
  }

  /// P_ij = exp(S_ij - L_i) from the quantized operands.
  Tensor probabilities(std::size_t i, std::size_t j) const {
    Tensor p = Policy::mm_nt(st_.q_hat[i], st_.k_hat[j]);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      const float lse = st_.lse[i * st_.block_q + r];
      for (float& x : p.row(r)) x = std::exp(x * scale_ - lse);
    }
    return p;
  }

  BackwardTile<Policy> tile(std::size_t i, std::size_t j) const {
    const Tensor p = probabilities(i, j);
    const Tensor dp = opts_.dov == DovPrecision::kFP16
                          ? matmul_fp(d_o_tiles_[i], vt_tiles_[j])
                          : Policy::mm_nt(d_o_hat_[i], st_.v_hat[j]);
    Tensor ds(p.rows(), p.cols());
    std::vector<float> rowsum(p.rows(), 0.0f);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      const float delta = delta_[i * st_.block_q + r];
      const auto prow = p.row(r);
      const auto dprow = dp.row(r);
      auto dsrow = ds.row(r);
      for (std::size_t c = 0; c < prow.size(); ++c) {
        // Chain rule through S = scale * Q K^T.
        dsrow[c] = prow[c] * (dprow[c] - delta) * scale_;
        rowsum[r] += dsrow[c];
      }
    }
    return {Policy::quantize(p), Policy::quantize(ds), std::move(rowsum)};
  }

  void accumulate_dv_dk(const BackwardTile<Policy>& t, std::size_t i, Tensor& dv_j,
                        Tensor& dk_j) const {
    add_into(dv_j, Policy::mm_tn(t.p_hat, d_o_hat_[i]));
    add_into(dk_j, Policy::mm_tn(t.ds_hat, st_.q_hat[i]));
  }

  void accumulate_dq(const BackwardTile<Policy>& t, std::size_t j, Tensor& dq_i) const {
    add_into(dq_i, Policy::mm(t.ds_hat, st_.k_hat[j]));
    if (!st_.smooth_k) return;
    // K was centred in the forward pass; restore the rowsum(dS) K_m term.
    for (std::size_t r = 0; r < dq_i.rows(); ++r) {
      auto row = dq_i.row(r);
      for (std::size_t c = 0; c < d_; ++c) row[c] += t.ds_rowsum[r] * st_.k_mean[c];
    }
  }

  GradTriple<float> run() const {
    const std::size_t n = st_.o.rows();
    const std::size_t tiles_q = n / st_.block_q;
    const std::size_t tiles_kv = n / st_.block_kv;
    std::vector<Tensor> dq(tiles_q, Tensor(st_.block_q, d_));
    std::vector<Tensor> dk(tiles_kv, Tensor(st_.block_kv, d_));
    std::vector<Tensor> dv(tiles_kv, Tensor(st_.block_kv, d_));

    if (thread_count() <= 1) {
      for (std::size_t j = 0; j < tiles_kv; ++j) {
        for (std::size_t i = 0; i < tiles_q; ++i) {
          const auto t = tile(i, j);
          accumulate_dv_dk(t, i, dv[j], dk[j]);
          accumulate_dq(t, j, dq[i]);
        }
      }
    } else {
      // Same per-element accumulation order as the loop above: dK_j, dV_j
      // over increasing i, dQ_i over increasing j. Tiles are recomputed.
      parallel_for(tiles_kv, [&](std::size_t j) {
        for (std::size_t i = 0; i < tiles_q; ++i) accumulate_dv_dk(tile(i, j), i, dv[j], dk[j]);
      });
      parallel_for(tiles_q, [&](std::size_t i) {
        for (std::size_t j = 0; j < tiles_kv; ++j) accumulate_dq(tile(i, j), j, dq[i]);
      });
    }

    GradTriple<float> g{Tensor(n, d_), Tensor(n, d_), Tensor(n, d_)};
    for (std::size_t i = 0; i < tiles_q; ++i) g.dq.set_row_block(i * st_.block_q, dq[i]);
    for (std::size_t j = 0; j < tiles_kv; ++j) {
      g.dk.set_row_block(j * st_.block_kv, dk[j]);
      g.dv.set_row_block(j * st_.block_kv, dv[j]);
    }
    return g;
  }

 private:
  const ForwardSavedState<Policy>& st_;
  BackwardOptions opts_;
  std::size_t d_;
  float scale_;
  std::vector<float> delta_;  // D = rowsum(dO * O)
  std::vector<Tensor> d_o_tiles_;
  std::vector<typename Policy::Block> d_o_hat_;
  std::vector<Tensor> vt_tiles_;
};

template <typename Policy>
void check_backward_inputs(const ForwardSavedState<Policy>& st, const Tensor& d_o,
                           const AttentionConfig& cfg) {
  if (!d_o.same_shape(st.o)) {
    throw std::invalid_argument("sagebwd_backward: dO is " + shape_string(d_o) +
                                ", forward output is " + shape_string(st.o));
  }
  if (cfg.block_q != st.block_q || cfg.block_kv != st.block_kv ||
      cfg.apply_sm_scale != st.apply_sm_scale || cfg.smooth_k != st.smooth_k) {
    throw std::invalid_argument("sagebwd_backward: config differs from the forward pass");
  }
}

}  // namespace detail

/// INT8 backward returning gradients with respect to the original
/// (uncentred) Q, K, V.
template <typename Policy>
GradTriple<float> sagebwd_backward(const ForwardSavedState<Policy>& st, const Tensor& d_o,
                                   const AttentionConfig& cfg, BackwardOptions opts = {}) {
  detail::check_backward_inputs(st, d_o, cfg);
  return detail::BackwardPass<Policy>(st, d_o, opts).run();
}

/// The backward pass with dO V^T either kept unquantized or INT8-quantized.
template <typename Policy>
GradTriple<float> ablate_dov_precision(const ForwardSavedState<Policy>& st, const Tensor& d_o,
                                       const AttentionConfig& cfg, DovPrecision mode) {
  return sagebwd_backward(st, d_o, cfg, BackwardOptions{mode, DpVSource::kOriginal});
}

/// The probabilities the backward pass recomputes for tile (i, j).
template <typename Policy>
Tensor recompute_probabilities(const ForwardSavedState<Policy>& st, std::size_t i,
                               std::size_t j) {
  const Tensor zeros(st.o.rows(), st.o.cols());
  return detail::BackwardPass<Policy>(st, zeros, {}).probabilities(i, j);
}

// ---------------------------------------------------------------------------
// Full-precision oracles

/// Untiled analytic gradients of softmax(scale * Q K^T) V:
///   dV = P^T dO, dP = dO V^T, D = rowsum(dO * O), dS = P * (dP - D),
///   dQ = scale * dS K, dK = scale * dS^T Q.
template <typename T>
GradTriple<T> reference_attention_backward(const Matrix<T>& q, const Matrix<T>& k,
                                           const Matrix<T>& v, const Matrix<T>& d_o,
                                           bool apply_sm_scale = true) {
  require_qkv("reference_attention_backward", q, k, v);
  if (!d_o.same_shape(q)) {
    throw std::invalid_argument("reference_attention_backward: dO shape " + shape_string(d_o));
  }
  const T scale = softmax_scale<T>(q.cols(), apply_sm_scale);
  Matrix<T> p = matmul(q, k.transposed());
  for (std::size_t r = 0; r < p.rows(); ++r) {
    auto row = p.row(r);
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
  const Matrix<T> o = matmul(p, v);
  GradTriple<T> g;
  g.dv = matmul(p.transposed(), d_o);
  Matrix<T> ds = matmul(d_o, v.transposed());  // dP
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    T delta = 0;
    for (std::size_t c = 0; c < o.cols(); ++c) delta += d_o(r, c) * o(r, c);
    for (std::size_t c = 0; c < ds.cols(); ++c) ds(r, c) = p(r, c) * (ds(r, c) - delta) * scale;
  }
  g.dq = matmul(ds, k);
  g.dk = matmul(ds.transposed(), q);
  return g;
}

struct FiniteDifferenceReport {
  double max_rel_dq = 0.0;
  double max_rel_dk = 0.0;
  double max_rel_dv = 0.0;
  double worst() const { return std::max({max_rel_dq, max_rel_dk, max_rel_dv}); }
};

// Gradients below this magnitude are compared absolutely (relative to it).
inline constexpr double kFdFloor = 1e-3;

/// Central differences of <dO, attention(Q, K, V)> in double against the
/// analytic double-precision gradients. Per element the deviation is
/// |analytic - numeric| / max(|analytic|, |numeric|, kFdFloor).
inline FiniteDifferenceReport finite_difference_check(const Tensor& q, const Tensor& k,
                                                      const Tensor& v, const Tensor& d_o,
                                                      double epsilon,
                                                      bool apply_sm_scale = true) {
  using M = Matrix<double>;
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite_difference_check: epsilon <= 0");
  M qd = M::cast_from(q), kd = M::cast_from(k), vd = M::cast_from(v);
  const M god = M::cast_from(d_o);
  const GradTriple<double> analytic =
      reference_attention_backward(qd, kd, vd, god, apply_sm_scale);

  auto loss = [&] {
    const M o = reference_attention(qd, kd, vd, apply_sm_scale);
    double acc = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i) acc += o.data()[i] * god.data()[i];
    return acc;
  };
  auto sweep = [&](M& x, const M& grad) {
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x.data()[i];
      x.data()[i] = saved + epsilon;
      const double up = loss();
      x.data()[i] = saved - epsilon;
      const double down = loss();
      x.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = grad.data()[i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), kFdFloor});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
    return worst;
  };
  FiniteDifferenceReport rep;
  rep.max_rel_dq = sweep(qd, analytic.dq);
  rep.max_rel_dk = sweep(kd, analytic.dk);
  rep.max_rel_dv = sweep(vd, analytic.dv);
  return rep;
}

}  // namespace lowbit_attn
