// Copyright 2026 The lowbit-attn Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include <gtest/gtest.h>

#include "lowbit_attn/ablation.hpp"
#include "lowbit_attn/quantizers.hpp"
#include "lowbit_attn/synthetic.hpp"
#include "oracles.hpp"

namespace la = lowbit_attn;
using la::Tensor;

namespace {

Tensor row_of(std::vector<float> v) {
  Tensor t(1, v.size());
  std::copy(v.begin(), v.end(), t.values().begin());
  return t;
}

Tensor gaussian(std::size_t r, std::size_t c, std::uint64_t seed) {
  la::Rng rng(seed);
  return la::gaussian_tensor(r, c, rng);
}

TEST(Phi, BlockOfSixes) {
  const Tensor x = row_of(std::vector<float>(16, 6.0f));
  const la::MicroscaledMatrix m = la::phi(x, la::Microscaling::kNVFP4);
  EXPECT_EQ(m.scale(0, 0), 1.0f);
  for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(la::e2m1_decode(m.code(0, c)), 6.0f);
  EXPECT_EQ(la::phi_inv(m), x);
}

TEST(Phi, SingleNonZero) {
  std::vector<float> v(16, 0.0f);
  v[0] = 3.0f;
  const la::MicroscaledMatrix m = la::phi(row_of(v), la::Microscaling::kNVFP4);
  EXPECT_EQ(m.scale(0, 0), 0.5f);
  EXPECT_EQ(la::e2m1_decode(m.code(0, 0)), 6.0f);
  for (std::size_t c = 1; c < 16; ++c) EXPECT_EQ(la::e2m1_decode(m.code(0, c)), 0.0f);
}

TEST(Phi, GaussianBlocksMatchBruteForceNearest) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Tensor x = gaussian(4, 64, seed);
    EXPECT_EQ(la::phi_inv(la::phi(x, la::Microscaling::kNVFP4)), oracle::microscale(x, 16, true));
    EXPECT_EQ(la::phi_inv(la::phi(x, la::Microscaling::kMXFP4)), oracle::microscale(x, 32, false));
  }
}

TEST(Phi, DequantizedElementIsNearestScaledGridPoint) {
  const Tensor x = gaussian(1, 16, 99);
  const la::MicroscaledMatrix m = la::phi(x, la::Microscaling::kNVFP4);
  const Tensor y = la::phi_inv(m);
  const double s = m.scale(0, 0);
  for (std::size_t c = 0; c < 16; ++c) {
    double best = std::numeric_limits<double>::infinity();
    for (double v : oracle::kE2M1) {
      for (double sign : {-1.0, 1.0}) best = std::min(best, std::fabs(x(0, c) - sign * v * s));
    }
    EXPECT_NEAR(std::fabs(x(0, c) - y(0, c)), best, 1e-7) << c;
  }
}

TEST(Phi, ZeroBlocks) {
  const Tensor z(2, 32);
  for (auto fmt : {la::Microscaling::kNVFP4, la::Microscaling::kMXFP4}) {
    const la::MicroscaledMatrix m = la::phi(z, fmt);
    EXPECT_EQ(la::phi_inv(m), z);
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t b = 0; b < m.blocks_per_row(); ++b) EXPECT_GT(m.scale(r, b), 0.0f);
    }
  }
}

TEST(Phi, ScaleThatRoundsToZeroLeavesZeroCodes) {
  std::vector<float> v(16, 0.0f);
  v[3] = 1e-5f;  // 1e-5 / 6 is below half the smallest E4M3 subnormal
  const la::MicroscaledMatrix m = la::phi(row_of(v), la::Microscaling::kNVFP4);
  EXPECT_EQ(m.scale(0, 0), 0.0f);
  for (std::uint8_t c : m.codes()) EXPECT_EQ(c, 0);
}

TEST(Phi, RepresentableInputIsFixedPoint) {
  la::Rng rng(4);
  Tensor x(3, 32);
  const float scales[] = {0.25f, 1.5f, 0.0078125f};
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 32; ++c) {
      const auto code = static_cast<std::uint8_t>(rng.below(16));
      x(r, c) = scales[r] * static_cast<float>(oracle::e2m1_value(code));
    }
    x(r, 0) = 6.0f * scales[r];  // pins the block maximum
    x(r, 16) = -6.0f * scales[r];
  }
  EXPECT_EQ(la::phi_inv(la::phi(x, la::Microscaling::kNVFP4)), x);
}

TEST(Phi, CodesAlwaysLegalAndScaleCoversBlock) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Tensor x = gaussian(8, 64, seed);
    for (float& v : x.values()) v *= 100.0f;
    for (auto fmt : {la::Microscaling::kNVFP4, la::Microscaling::kMXFP4}) {
      const la::MicroscaledMatrix m = la::phi(x, fmt);
      const Tensor y = la::phi_inv(m);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t b = 0; b < m.blocks_per_row(); ++b) {
          const double s = m.scale(r, b);
          for (std::size_t c = b * m.block_width(); c < (b + 1) * m.block_width(); ++c) {
            EXPECT_LE(std::fabs(la::e2m1_decode(m.code(r, c))), 6.0f);
            if (fmt == la::Microscaling::kMXFP4) {
              EXPECT_GE(6.0 * s, std::fabs(x(r, c)));
            }
            EXPECT_LE(std::fabs(x(r, c) - y(r, c)), std::max(2.0 * s, std::fabs(x(r, c)) - 6.0 * s));
          }
        }
      }
    }
  }
}

TEST(Phi, Errors) {
  EXPECT_THROW(la::phi(Tensor(1, 24), la::Microscaling::kNVFP4), std::invalid_argument);
  EXPECT_THROW(la::phi(Tensor(1, 16), la::Microscaling::kMXFP4), std::invalid_argument);
  EXPECT_THROW(la::phi(Tensor(1, 32), 16, la::ScaleFormat::kE8M0), std::invalid_argument);
  EXPECT_THROW(la::phi(Tensor(1, 32), 32, la::ScaleFormat::kE4M3), std::invalid_argument);
  Tensor bad(1, 16);
  bad(0, 5) = std::numeric_limits<float>::infinity();
  EXPECT_THROW(la::phi(bad, la::Microscaling::kNVFP4), std::domain_error);
}

TEST(Phi, NvfpErrorBelowMxfpOnOutlierData) {
  double nv = 0.0, mx = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    la::SyntheticSpec spec;
    spec.n = 256;
    spec.seed = seed;
    const Tensor k = la::generate_synthetic(spec).k;
    const double e_nv = la::relative_l1(la::phi_inv(la::phi(k, la::Microscaling::kNVFP4)), k);
    const double e_mx = la::relative_l1(la::phi_inv(la::phi(k, la::Microscaling::kMXFP4)), k);
    EXPECT_LT(e_nv, e_mx) << "seed " << seed;
    nv += e_nv;
    mx += e_mx;
  }
  EXPECT_LT(nv, 0.8 * mx);
}

TEST(Psi, Examples) {
  Tensor x(2, 2);
  x(0, 0) = 127.0f;
  x(0, 1) = -3.4f;
  x(1, 0) = 0.5f;
  x(1, 1) = 64.6f;
  const la::BlockQuantizedInt8 q = la::psi(x);
  EXPECT_EQ(q.scale, 1.0f);
  EXPECT_EQ(q.code(0, 0), 127);
  EXPECT_EQ(q.code(0, 1), -3);
  EXPECT_EQ(q.code(1, 0), 0);
  EXPECT_EQ(q.code(1, 1), 65);

  Tensor y(3, 3);
  for (float& v : y.values()) v = -254.0f;
  const la::BlockQuantizedInt8 r = la::psi(y);
  EXPECT_EQ(r.scale, 2.0f);
  for (std::int8_t c : r.codes) EXPECT_EQ(c, -127);
}

TEST(Psi, ZeroBlock) {
  const la::BlockQuantizedInt8 q = la::psi(Tensor(4, 4));
  EXPECT_EQ(q.scale, 0.0f);
  for (std::int8_t c : q.codes) EXPECT_EQ(c, 0);
  EXPECT_EQ(la::dequantize(q), Tensor(4, 4));
}

TEST(Psi, ErrorAtMostHalfStep) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Tensor x = gaussian(16, 16, seed);
    for (float& v : x.values()) v *= static_cast<float>(seed);
    const la::BlockQuantizedInt8 q = la::psi(x);
    const Tensor y = la::dequantize(q);
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_LE(std::fabs(static_cast<double>(x.data()[i]) - y.data()[i]), q.scale * (0.5 + 1e-5));
      EXPECT_NE(q.codes[i], -128);
    }
  }
}

TEST(Psi, ScaleIsMaxOver127) {
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    const Tensor x = gaussian(8, 8, seed);
    float amax = 0.0f;
    for (float v : x.values()) amax = std::max(amax, std::fabs(v));
    const float raw = amax / 127.0f;
    const float s = la::psi(x).scale;
    EXPECT_TRUE(s == raw || s == std::nextafter(raw, 0.0f) || s == std::nextafter(raw, 1.0f)) << seed;
  }
}

TEST(Psi, IdempotentOnItsImage) {
  for (std::uint64_t seed = 1; seed <= 2000; ++seed) {
    Tensor x = gaussian(4, 4, seed);
    for (float& v : x.values()) v *= std::exp2(static_cast<float>(seed % 40) - 20.0f);
    const la::BlockQuantizedInt8 q = la::psi(x);
    const la::BlockQuantizedInt8 again = la::psi(la::dequantize(q));
    ASSERT_EQ(again.scale, q.scale) << "seed " << seed;
    ASSERT_EQ(again.codes, q.codes) << "seed " << seed;
  }
}

TEST(PerToken, Examples) {
  // Row 0 holds the running max; row 1 is uniform below it.
  Tensor s(2, 4);
  const float vals[] = {0.0f, -1.0f, -2.0f, -0.5f};
  for (std::size_t c = 0; c < 4; ++c) {
    s(0, c) = vals[c];
    s(1, c) = -3.0f;
  }
  const std::vector<float> rowmax = {0.0f, -3.0f};
  const std::vector<float> m = {0.0f, -1.0f};
  Tensor p(2, 4);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 4; ++c) p(r, c) = std::exp(s(r, c) - m[r]);
  }
  const la::PerTokenQuantizedInt8 q = la::quantize_p_per_token(p, rowmax, m);
  EXPECT_EQ(q.row_scales[0], 1.0f / 127.0f);
  EXPECT_EQ(q.code(0, 0), 127);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(q.code(1, c), 127);
  EXPECT_FLOAT_EQ(q.row_scales[1], std::exp(-2.0f) / 127.0f);
}

TEST(PerToken, RandomTileBoundAndRange) {
  la::Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor s = la::gaussian_tensor(8, 32, rng);
    std::vector<float> rowmax(8), m(8);
    Tensor p(8, 32);
    for (std::size_t r = 0; r < 8; ++r) {
      rowmax[r] = *std::max_element(s.row(r).begin(), s.row(r).end());
      m[r] = rowmax[r] + static_cast<float>(rng.uniform()) * 3.0f;
      for (std::size_t c = 0; c < 32; ++c) p(r, c) = std::exp(s(r, c) - m[r]);
    }
    const la::PerTokenQuantizedInt8 q = la::quantize_p_per_token(p, rowmax, m);
    const Tensor y = la::dequantize(q);
    for (std::size_t r = 0; r < 8; ++r) {
      EXPECT_GT(q.row_scales[r], 0.0f);
      const double peak = std::exp(static_cast<double>(rowmax[r]) - m[r]);
      for (std::size_t c = 0; c < 32; ++c) {
        EXPECT_GE(q.code(r, c), 0);
        EXPECT_LE(q.code(r, c), 127);
        EXPECT_LE(std::fabs(y(r, c) - p(r, c)) / peak, 1.0 / (2 * 127) + 1e-6);
      }
    }
  }
}

TEST(PerToken, Preconditions) {
  Tensor p(1, 2);
  p(0, 0) = 1.0f;
  const std::vector<float> rowmax = {0.0f}, below = {-1.0f}, ok = {0.0f};
  EXPECT_THROW(la::quantize_p_per_token(p, rowmax, below), std::invalid_argument);
  p(0, 1) = 3.0f;  // larger than exp(rowmax - m)
  EXPECT_THROW(la::quantize_p_per_token(p, rowmax, ok), std::invalid_argument);
  EXPECT_THROW(la::quantize_p_per_token(p, std::vector<float>{}, ok), std::invalid_argument);
}

TEST(TwoLevel, Examples) {
  std::vector<float> v(16, 0.0f);
  v[0] = 2688.0f;
  v[1] = 100.0f;
  EXPECT_EQ(la::two_level_quantize(row_of(v)).s_p1[0], 1.0f);
  v[0] = 1.0f;
  v[1] = 0.25f;
  const la::TwoLevelP t = la::two_level_quantize(row_of(v));
  EXPECT_EQ(t.s_p1[0], 1.0f / 2688.0f);
}

TEST(TwoLevel, ZeroRowAndNegativeInput) {
  Tensor p(2, 16);
  p(1, 3) = 0.5f;
  const la::TwoLevelP t = la::two_level_quantize(p);
  EXPECT_EQ(t.s_p1[0], std::numeric_limits<float>::min());
  for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(t.inner.code(0, c).bits, 0);
  EXPECT_EQ(t.reconstruct()(0, 3), 0.0f);
  p(0, 0) = -0.1f;
  EXPECT_THROW(la::two_level_quantize(p), std::invalid_argument);
}

TEST(TwoLevel, LiftedRowMaximaWithinRange) {
  la::Rng rng(23);
  const Tensor p = la::softmax_rows(32, 64, 2.0f, rng);
  const la::TwoLevelP t = la::two_level_quantize(p);
  for (std::size_t r = 0; r < p.rows(); ++r) {
    float lifted_max = 0.0f;
    for (float v : p.row(r)) lifted_max = std::max(lifted_max, v / t.s_p1[r]);
    EXPECT_NEAR(lifted_max, 2688.0f, 2688.0f * 1e-6f);
  }
}

TEST(TwoLevel, ReconstructionBeatsDirectPhi) {
  // Mean relative error over softmax-like rows at several temperatures.
  for (float temperature : {0.5f, 1.0f, 2.0f, 4.0f}) {
    la::Rng rng(static_cast<std::uint64_t>(temperature * 10));
    const Tensor p = la::softmax_rows(64, 128, temperature, rng);
    const double two = la::relative_l1(la::two_level_quantize(p).reconstruct(), p);
    const double direct = la::relative_l1(la::phi_inv(la::phi(p, la::Microscaling::kNVFP4)), p);
    EXPECT_LT(two, direct) << "temperature " << temperature;
  }
}

TEST(TwoLevel, UsesMoreOfTheScaleRange) {
  la::Rng rng(31);
  const Tensor p = la::softmax_rows(64, 128, 2.0f, rng);
  const la::ScaleUsage direct = la::scale_usage(la::phi(p, la::Microscaling::kNVFP4));
  const la::ScaleUsage two = la::scale_usage(la::two_level_quantize(p).inner);
  EXPECT_GT(two.upper_half_fraction, direct.upper_half_fraction);
  EXPECT_GT(two.code_quantile_range, direct.code_quantile_range);
  EXPECT_GT(two.distinct_codes, direct.distinct_codes);
}

}  // namespace
