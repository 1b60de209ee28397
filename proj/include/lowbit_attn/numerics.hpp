// Copyright 2026 The lowbit-attn Authors
// SPDX-License-Identifier: Apache-2.0

// Software codecs for the low-bit number formats used by the attention
// kernels: E2M1 (FP4 elements), E4M3 and E8M0 (microscaling scale factors)
// and symmetric INT8.
//
// All encoders round to nearest with ties to even and saturate out-of-range
// magnitudes. Non-finite inputs are rejected with std::domain_error.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace lowbit_attn {

enum class ScaleFormat : std::uint8_t { kE4M3, kE8M0 };

namespace detail {

inline void require_finite(float v, const char* what) {
  if (!std::isfinite(v)) {
    throw std::domain_error(std::string(what) + ": non-finite input");
  }
}

/// Sign/exponent/mantissa minifloat with IEEE-style subnormals and no
/// infinities. `MaxCode` is the largest finite non-negative code.
template <int ExpBits, int MantBits, int Bias, std::uint8_t MaxCode>
struct MiniFloat {
  static constexpr int kExpBits = ExpBits;
  static constexpr int kMantBits = MantBits;
  static constexpr int kBias = Bias;
  static constexpr std::uint8_t kSignBit = std::uint8_t{1} << (ExpBits + MantBits);
  static constexpr std::uint8_t kMaxCode = MaxCode;
  static constexpr int kMinNormalExp = 1 - Bias;

  static float decode_magnitude(std::uint8_t code) {
    const int exp_field = (code >> MantBits) & ((1 << ExpBits) - 1);
    const int mant = code & ((1 << MantBits) - 1);
    if (exp_field == 0) {
      return std::ldexp(static_cast<float>(mant), kMinNormalExp - MantBits);
    }
    return std::ldexp(static_cast<float>((1 << MantBits) + mant),
                      exp_field - Bias - MantBits);
  }

  static float max_finite() { return decode_magnitude(MaxCode); }

  // Non-negative values indexed by code: table[c] == decode_magnitude(c).
  static const std::array<float, MaxCode + 1>& magnitudes() {
    static const auto table = [] {
      std::array<float, MaxCode + 1> t{};
      for (int c = 0; c <= MaxCode; ++c) {
        t[c] = decode_magnitude(static_cast<std::uint8_t>(c));
      }
      return t;
    }();
    return table;
  }

  // Round |v| onto the format grid. Inputs at or above the max saturate.
  static float round_magnitude(float a) {
    const float top = max_finite();
    if (a >= top) return top;
    int e = 0;
    (void)std::frexp(a, &e);  // a = f * 2^e, f in [0.5, 1)
    const int unbiased = std::max(e - 1, kMinNormalExp);
    const float quantum = std::ldexp(1.0f, unbiased - MantBits);
    // a / quantum is exact: quantum is a power of two and a is normal.
    return std::nearbyint(a / quantum) * quantum;
  }

  static std::uint8_t code_of_magnitude(float rounded) {
    const auto& table = magnitudes();
    const auto it = std::lower_bound(table.begin(), table.end(), rounded);
    return static_cast<std::uint8_t>(it - table.begin());
  }

  static std::uint8_t encode(float v) {
    const std::uint8_t mag = code_of_magnitude(round_magnitude(std::fabs(v)));
    return std::signbit(v) ? static_cast<std::uint8_t>(mag | kSignBit) : mag;
  }

  static float decode(std::uint8_t code) {
    const float mag = decode_magnitude(static_cast<std::uint8_t>(code & (kSignBit - 1)));
    return (code & kSignBit) ? -mag : mag;
  }
};

using E2M1Format = MiniFloat<2, 1, 1, 0x7>;
// OCP FP8 E4M3FN: exponent 15 / mantissa 7 is the only NaN, so the largest
// finite code is 0x7E = 448.
using E4M3Format = MiniFloat<4, 3, 7, 0x7E>;

}  // namespace detail

// ---------------------------------------------------------------------------
// E2M1

/// 4-bit float: 1 sign bit, 2 exponent bits, 1 mantissa bit.
struct E2M1Code {
  std::uint8_t bits = 0;
  friend bool operator==(E2M1Code, E2M1Code) = default;
};

inline constexpr float kE2M1Max = 6.0f;

inline E2M1Code e2m1_encode(float v) {
  detail::require_finite(v, "e2m1_encode");
  return E2M1Code{detail::E2M1Format::encode(v)};
}

inline float e2m1_decode(E2M1Code c) {
  return detail::E2M1Format::decode(static_cast<std::uint8_t>(c.bits & 0xF));
}

// ---------------------------------------------------------------------------
// E4M3

struct E4M3Code {
  std::uint8_t bits = 0;
  friend bool operator==(E4M3Code, E4M3Code) = default;
};

inline constexpr float kE4M3Max = 448.0f;

inline bool e4m3_is_nan(E4M3Code c) { return (c.bits & 0x7F) == 0x7F; }

/// Nearest E4M3 value (ties to even mantissa); |v| > 448 saturates.
inline E4M3Code e4m3_round(float v) {
  detail::require_finite(v, "e4m3_round");
  return E4M3Code{detail::E4M3Format::encode(v)};
}

inline float e4m3_decode(E4M3Code c) {
  if (e4m3_is_nan(c)) return std::numeric_limits<float>::quiet_NaN();
  return detail::E4M3Format::decode(c.bits);
}

// ---------------------------------------------------------------------------
// E8M0

/// Pure power-of-two scale: value = 2^(bits - 127). Code 255 is NaN and is
/// never produced.
struct E8M0Code {
  std::uint8_t bits = 127;
  friend bool operator==(E8M0Code, E8M0Code) = default;
};

inline constexpr int kE8M0Bias = 127;

/// Smallest representable power of two >= v. Saturates at 2^127 and 2^-127.
inline E8M0Code e8m0_round_up(float v) {
  detail::require_finite(v, "e8m0_round_up");
  if (!(v > 0.0f)) throw std::domain_error("e8m0_round_up: requires v > 0");
  int e = 0;
  const float f = std::frexp(v, &e);
  const int exp = (f == 0.5f) ? e - 1 : e;
  const int clamped = std::clamp(exp, -kE8M0Bias, kE8M0Bias);
  return E8M0Code{static_cast<std::uint8_t>(clamped + kE8M0Bias)};
}

inline float e8m0_decode(E8M0Code c) {
  if (c.bits == 0xFF) return std::numeric_limits<float>::quiet_NaN();
  return std::ldexp(1.0f, static_cast<int>(c.bits) - kE8M0Bias);
}

// ---------------------------------------------------------------------------
// INT8

inline constexpr int kInt8Max = 127;

/// Nearest integer in [-127, 127], ties to even. -128 is never produced.
inline std::int8_t int8_round(float v) {
  detail::require_finite(v, "int8_round");
  const float r = std::nearbyint(std::clamp(v, -127.0f, 127.0f));
  return static_cast<std::int8_t>(r);
}

// ---------------------------------------------------------------------------
// Scale codes, stored as raw bytes tagged with their format.

inline float decode_scale(std::uint8_t bits, ScaleFormat fmt) {
  return fmt == ScaleFormat::kE4M3 ? e4m3_decode(E4M3Code{bits})
                                   : e8m0_decode(E8M0Code{bits});
}

// ---------------------------------------------------------------------------
// Enumeration of representable values

enum class ElementFormat : std::uint8_t { kE2M1, kE4M3 };

/// Distinct finite values of `fmt` in [lo, hi], ascending. +0 and -0 count
/// once.
inline std::vector<float> enumerate_representable(ElementFormat fmt, float lo, float hi) {
  if (!(lo <= hi)) throw std::invalid_argument("enumerate_representable: lo > hi");
  std::vector<float> values;
  const int codes = fmt == ElementFormat::kE2M1 ? 16 : 256;
  for (int c = 0; c < codes; ++c) {
    const float v = fmt == ElementFormat::kE2M1
                        ? e2m1_decode(E2M1Code{static_cast<std::uint8_t>(c)})
                        : e4m3_decode(E4M3Code{static_cast<std::uint8_t>(c)});
    if (std::isnan(v)) continue;
    if (v >= lo && v <= hi) values.push_back(v == 0.0f ? 0.0f : v);
  }
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());
  return values;
}

}  // namespace lowbit_attn
