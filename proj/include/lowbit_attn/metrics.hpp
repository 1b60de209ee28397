// Copyright 2026 The lowbit-attn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>

#include "lowbit_attn/tensor.hpp"

namespace lowbit_attn {

/// Cosine similarity, relative L1 distance and RMSE of a test output against
/// a reference, both flattened. Fields that are undefined for the inputs
/// (zero reference for L1, a zero vector for the cosine) are NaN.
struct AccuracyReport {
  double cos_sim = 1.0;
  double l1 = 0.0;
  double rmse = 0.0;

  bool defined() const { return !std::isnan(cos_sim) && !std::isnan(l1); }
};

/// Computed in double regardless of the element type.
template <typename A, typename B>
AccuracyReport accuracy_metrics(const Matrix<A>& ref, const Matrix<B>& test) {
  if (ref.rows() != test.rows() || ref.cols() != test.cols()) {
    throw std::invalid_argument("accuracy_metrics: shape mismatch " + shape_string(ref) +
                                " vs " + shape_string(test));
  }
  if (ref.empty()) throw std::invalid_argument("accuracy_metrics: empty tensors");
  double dot = 0.0, ref_sq = 0.0, test_sq = 0.0, abs_diff = 0.0, abs_ref = 0.0, sq_diff = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double o = static_cast<double>(ref.data()[i]);
    const double t = static_cast<double>(test.data()[i]);
    dot += o * t;
    ref_sq += o * o;
    test_sq += t * t;
    abs_diff += std::fabs(o - t);
    abs_ref += std::fabs(o);
    sq_diff += (o - t) * (o - t);
  }
  constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
  AccuracyReport rep;
  rep.cos_sim = (ref_sq > 0.0 && test_sq > 0.0) ? dot / (std::sqrt(ref_sq) * std::sqrt(test_sq))
                                                : kNaN;
  rep.l1 = abs_ref > 0.0 ? abs_diff / abs_ref : kNaN;
  rep.rmse = std::sqrt(sq_diff / static_cast<double>(ref.size()));
  return rep;
}

/// sum |a - b| / sum |b|, the relative L1 distance of `a` from `b`.
template <typename A, typename B>
double relative_l1(const Matrix<A>& a, const Matrix<B>& b) {
  return accuracy_metrics(b, a).l1;
}

}  // namespace lowbit_attn
