// Copyright 2026 The lowbit-attn Authors
// SPDX-License-Identifier: Apache-2.0

// Quantization schemes for attention operands:
//  - microscaling FP4 (phi / phi_inv) in the NVFP4 and MXFP4 configurations,
//  - per-block symmetric INT8 (psi),
//  - per-token INT8 for the online-softmax probabilities,
//  - two-level scaling of the probabilities ahead of NVFP4.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lowbit_attn/numerics.hpp"
#include "lowbit_attn/tensor.hpp"

namespace lowbit_attn {

/// The two legal microscaling configurations: E2M1 elements with 1x16
/// blocks and E4M3 scales, or 1x32 blocks and E8M0 scales.
enum class Microscaling : std::uint8_t { kNVFP4, kMXFP4 };

constexpr std::size_t block_width(Microscaling m) {
  return m == Microscaling::kNVFP4 ? 16 : 32;
}

constexpr ScaleFormat scale_format(Microscaling m) {
  return m == Microscaling::kNVFP4 ? ScaleFormat::kE4M3 : ScaleFormat::kE8M0;
}

inline Microscaling microscaling_for(std::size_t width, ScaleFormat fmt) {
  if (width == 16 && fmt == ScaleFormat::kE4M3) return Microscaling::kNVFP4;
  if (width == 32 && fmt == ScaleFormat::kE8M0) return Microscaling::kMXFP4;
  throw std::invalid_argument("microscaling: only 1x16/E4M3 and 1x32/E8M0 are supported");
}

inline const char* to_string(Microscaling m) {
  return m == Microscaling::kNVFP4 ? "nvfp4" : "mxfp4";
}

/// E2M1 codes plus one scale code per 1 x n block along each row.
class MicroscaledMatrix {
 public:
  MicroscaledMatrix() = default;
  MicroscaledMatrix(std::size_t rows, std::size_t cols, Microscaling format,
                    std::vector<std::uint8_t> codes, std::vector<std::uint8_t> scales)
      : rows_(rows), cols_(cols), format_(format), codes_(std::move(codes)),
        scales_(std::move(scales)) {
    const std::size_t n = lowbit_attn::block_width(format_);
    if (cols_ % n != 0) {
      throw std::invalid_argument("MicroscaledMatrix: cols not a multiple of block width");
    }
    if (codes_.size() != rows_ * cols_ || scales_.size() != rows_ * (cols_ / n)) {
      throw std::invalid_argument("MicroscaledMatrix: storage does not match shape");
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  Microscaling format() const noexcept { return format_; }
  std::size_t block_width() const noexcept { return lowbit_attn::block_width(format_); }
  ScaleFormat scale_format() const noexcept { return lowbit_attn::scale_format(format_); }
  std::size_t blocks_per_row() const noexcept { return cols_ / block_width(); }

  E2M1Code code(std::size_t r, std::size_t c) const { return E2M1Code{codes_[r * cols_ + c]}; }
  std::uint8_t scale_code(std::size_t r, std::size_t b) const {
    return scales_[r * blocks_per_row() + b];
  }
  float scale(std::size_t r, std::size_t b) const {
    return decode_scale(scale_code(r, b), scale_format());
  }
  float value(std::size_t r, std::size_t c) const {
    return scale(r, c / block_width()) * e2m1_decode(code(r, c));
  }

  std::span<const std::uint8_t> codes() const noexcept { return codes_; }
  std::span<const std::uint8_t> scale_codes() const noexcept { return scales_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Microscaling format_ = Microscaling::kNVFP4;
  std::vector<std::uint8_t> codes_;
  std::vector<std::uint8_t> scales_;
};

namespace detail {

// Scale code for a block whose absolute maximum is `amax`.
inline std::uint8_t microscale_code(float amax, ScaleFormat fmt) {
  if (fmt == ScaleFormat::kE4M3) {
    // All-zero block: smallest positive E4M3 (2^-9).
    if (amax == 0.0f) return 0x01;
    return e4m3_round(amax / kE2M1Max).bits;
  }
  if (amax == 0.0f) return 0x00;  // 2^-127
  const float raw = std::max(amax / kE2M1Max, std::numeric_limits<float>::denorm_min());
  return e8m0_round_up(raw).bits;
}

}  // namespace detail

/// Microscaling quantization: per 1 x n block, scale = max|x| / 6 rounded
/// into the scale format (E4M3 nearest, E8M0 up); elements are the E2M1
/// rounding of x / scale, saturated to +-6. A scale that rounds to zero
/// leaves the whole block at zero.
inline MicroscaledMatrix phi(const Tensor& x, Microscaling format) {
  const std::size_t n = block_width(format);
  const ScaleFormat fmt = scale_format(format);
  if (x.cols() % n != 0) {
    throw std::invalid_argument("phi: cols (" + std::to_string(x.cols()) +
                                ") not divisible by block width " + std::to_string(n));
  }
  const std::size_t blocks = x.cols() / n;
  std::vector<std::uint8_t> codes(x.size(), 0);
  std::vector<std::uint8_t> scales(x.rows() * blocks, 0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    for (std::size_t b = 0; b < blocks; ++b) {
      const auto block = row.subspan(b * n, n);
      float amax = 0.0f;
      for (float v : block) {
        detail::require_finite(v, "phi");
        amax = std::max(amax, std::fabs(v));
      }
      const std::uint8_t sc = detail::microscale_code(amax, fmt);
      scales[r * blocks + b] = sc;
      const float s = decode_scale(sc, fmt);
      if (s == 0.0f) continue;
      for (std::size_t k = 0; k < n; ++k) {
        codes[r * x.cols() + b * n + k] = e2m1_encode(block[k] / s).bits;
      }
    }
  }
  return MicroscaledMatrix(x.rows(), x.cols(), format, std::move(codes), std::move(scales));
}

inline MicroscaledMatrix phi(const Tensor& x, std::size_t width, ScaleFormat fmt) {
  return phi(x, microscaling_for(width, fmt));
}

/// Dequantization: element = decoded scale * decoded E2M1 code.
inline Tensor phi_inv(const MicroscaledMatrix& m) {
  Tensor out(m.rows(), m.cols());
  const std::size_t n = m.block_width();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t b = 0; b < m.blocks_per_row(); ++b) {
      const float s = m.scale(r, b);
      for (std::size_t k = b * n; k < (b + 1) * n; ++k) {
        out(r, k) = s * e2m1_decode(m.code(r, k));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// INT8

/// Symmetric INT8 codes sharing one full-precision scale (one FlashAttention
/// tile). The tile dimensions are the matrix dimensions.
struct BlockQuantizedInt8 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int8_t> codes;
  float scale = 0.0f;

  std::int8_t code(std::size_t r, std::size_t c) const { return codes[r * cols + c]; }

  BlockQuantizedInt8 transposed() const {
    BlockQuantizedInt8 out{cols, rows, std::vector<std::int8_t>(codes.size()), scale};
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) out.codes[c * rows + r] = codes[r * cols + c];
    }
    return out;
  }
};

/// Per-block INT8: scale = max|x| / 127, codes = round(x / scale). A zero
/// block gets scale 0 and zero codes.
inline BlockQuantizedInt8 psi(const Tensor& x) {
  BlockQuantizedInt8 out{x.rows(), x.cols(), std::vector<std::int8_t>(x.size(), 0), 0.0f};
  float amax = 0.0f;
  for (float v : x.values()) {
    detail::require_finite(v, "psi");
    amax = std::max(amax, std::fabs(v));
  }
  if (amax == 0.0f) return out;
  // amax / 127, moved by at most one ulp onto a fixed point of
  // s -> (127 s) / 127. Re-quantizing the dequantized block then finds the
  // same scale, so psi is idempotent on its own output.
  const float raw = amax / static_cast<float>(kInt8Max);
  const float snapped = (raw * static_cast<float>(kInt8Max)) / static_cast<float>(kInt8Max);
  out.scale = std::isfinite(snapped) && snapped > 0.0f ? snapped : raw;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out.codes[i] = int8_round(x.data()[i] / out.scale);
  }
  return out;
}

inline Tensor dequantize(const BlockQuantizedInt8& q) {
  Tensor out(q.rows, q.cols);
  for (std::size_t i = 0; i < q.codes.size(); ++i) {
    out.data()[i] = static_cast<float>(q.codes[i]) * q.scale;
  }
  return out;
}

/// INT8 codes with one scale per row.
struct PerTokenQuantizedInt8 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int8_t> codes;
  std::vector<float> row_scales;

  std::int8_t code(std::size_t r, std::size_t c) const { return codes[r * cols + c]; }
};

/// Per-token quantization of exp(S - m) reusing the online-softmax maxima:
/// row scale = exp(rowmax_S - m) / 127. Codes land in [0, 127].
inline PerTokenQuantizedInt8 quantize_p_per_token(const Tensor& p,
                                                  std::span<const float> rowmax_s,
                                                  std::span<const float> running_max) {
  if (rowmax_s.size() != p.rows() || running_max.size() != p.rows()) {
    throw std::invalid_argument("quantize_p_per_token: row statistics do not match tile");
  }
  PerTokenQuantizedInt8 out{p.rows(), p.cols(), std::vector<std::int8_t>(p.size(), 0),
                            std::vector<float>(p.rows(), 0.0f)};
  for (std::size_t r = 0; r < p.rows(); ++r) {
    if (rowmax_s[r] > running_max[r]) {
      throw std::invalid_argument("quantize_p_per_token: running max below tile row max");
    }
    const float peak = std::exp(rowmax_s[r] - running_max[r]);
    if (peak == 0.0f) {
      // The whole row underflowed; every exp(S - m) in it is zero too.
      out.row_scales[r] = std::numeric_limits<float>::min();
      continue;
    }
    const float scale = peak / static_cast<float>(kInt8Max);
    out.row_scales[r] = scale;
    const auto row = p.row(r);
    for (std::size_t c = 0; c < p.cols(); ++c) {
      const float q = row[c] / scale;
      if (!(q >= -0.5f && q <= 127.5f)) {
        throw std::invalid_argument("quantize_p_per_token: element outside [0, exp(rowmax - m)]");
      }
      out.codes[r * p.cols() + c] = int8_round(q);
    }
  }
  return out;
}

inline Tensor dequantize(const PerTokenQuantizedInt8& q) {
  Tensor out(q.rows, q.cols);
  for (std::size_t r = 0; r < q.rows; ++r) {
    for (std::size_t c = 0; c < q.cols; ++c) {
      out(r, c) = static_cast<float>(q.code(r, c)) * q.row_scales[r];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Two-level scaling

inline constexpr float kTwoLevelTarget = kE4M3Max * kE2M1Max;  // 2688

/// s_p1 per row (FP32, never quantized) and the microscaled P / s_p1.
struct TwoLevelP {
  std::vector<float> s_p1;
  MicroscaledMatrix inner;

  Tensor reconstruct() const {
    Tensor out = phi_inv(inner);
    for (std::size_t r = 0; r < out.rows(); ++r) {
      for (float& v : out.row(r)) v *= s_p1[r];
    }
    return out;
  }
};

/// First level: s_p1 = rowmax / (448 * 6) lifts each row's maximum to 2688.
/// Second level: phi of the lifted rows. A zero row gets s_p1 = FLT_MIN.
inline TwoLevelP two_level_quantize(const Tensor& p, Microscaling format = Microscaling::kNVFP4) {
  std::vector<float> s_p1(p.rows());
  Tensor lifted(p.rows(), p.cols());
  for (std::size_t r = 0; r < p.rows(); ++r) {
    const auto row = p.row(r);
    float rowmax = 0.0f;
    for (float v : row) {
      detail::require_finite(v, "two_level_quantize");
      if (v < 0.0f) throw std::invalid_argument("two_level_quantize: negative probability");
      rowmax = std::max(rowmax, v);
    }
    if (rowmax == 0.0f) {
      s_p1[r] = std::numeric_limits<float>::min();
      continue;  // lifted row stays zero
    }
    s_p1[r] = rowmax / kTwoLevelTarget;
    auto out = lifted.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) out[c] = row[c] / s_p1[r];
  }
  return TwoLevelP{std::move(s_p1), phi(lifted, format)};
}

}  // namespace lowbit_attn
