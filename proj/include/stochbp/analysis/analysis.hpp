// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

// Cost predictors for SBP and representation-similarity diagnostics.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "stochbp/errors.hpp"
#include "stochbp/kernels.hpp"
#include "stochbp/log.hpp"
#include "stochbp/models/common.hpp"
#include "stochbp/tensor.hpp"

namespace stochbp {

namespace detail {
inline void check_ratio(double r, const char* who) {
  if (!(r > 0.0 && r <= 1.0)) throw ConfigError(std::string(who) + ": keep ratio must be in (0, 1]");
}
}  // namespace detail

/// Cached-element ratio of a transformer block under SBP (see
/// transformer.hpp for the breakdown), in terms of head width d and tokens n:
/// (r(11d/n + 2) + 4d/n) / ((11d/n + 2) + 4d/n).
inline double predict_space_ratio_transformer(double d, double n, double r) {
  if (!(d >= 1.0) || !(n >= 1.0)) throw ConfigError("predict_space_ratio_transformer: d and n must be >= 1");
  detail::check_ratio(r, "predict_space_ratio_transformer");
  const double q = d / n;
  return (r * (11.0 * q + 2.0) + 4.0 * q) / ((11.0 * q + 2.0) + 4.0 * q);
}

/// Spatial part of charge m_s scaled by r, temporal part m_c kept.
inline double predict_space_ratio_stt(double m_s, double m_c, double r) {
  if (!(m_s > 0.0) || !(m_c >= 0.0)) throw ConfigError("predict_space_ratio_stt: need m_s > 0 and m_c >= 0");
  detail::check_ratio(r, "predict_space_ratio_stt");
  return (r * m_s + m_c) / (m_s + m_c);
}

/// Full forward plus a re-forward and backward over the kept fraction, with
/// forward and backward assumed to cost the same.
inline double predict_time_ratio(double r) {
  detail::check_ratio(r, "predict_time_ratio");
  return (1.0 + 2.0 * r) / 2.0;
}

namespace detail {

inline Tensor center_columns(const Tensor& x) {
  const std::size_t m = x.rows(), p = x.cols();
  Tensor c = x;
  for (std::size_t j = 0; j < p; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < m; ++i) mean += x(i, j);
    mean /= static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) c(i, j) -= mean;
  }
  return c;
}

inline double frobenius_sq(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return s;
}

}  // namespace detail

/// Linear CKA between two representations of the same m examples.
/// A representation with zero variance yields 0 (and a warning).
inline double cka_linear(const Tensor& x, const Tensor& y) {
  if (x.rank() != 2 || y.rank() != 2) throw DimensionError("cka_linear: inputs must be matrices");
  if (x.rows() != y.rows()) {
    throw DimensionError("cka_linear: example counts differ: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  if (x.rows() < 2) throw ConfigError("cka_linear: need at least 2 examples");
  const Tensor xc = detail::center_columns(x);
  const Tensor yc = detail::center_columns(y);
  const double xx = std::sqrt(detail::frobenius_sq(kernels::matmul_tn(xc, xc)));
  const double yy = std::sqrt(detail::frobenius_sq(kernels::matmul_tn(yc, yc)));
  if (xx == 0.0 || yy == 0.0) {
    warn("cka_linear: zero-variance representation, returning 0");
    return 0.0;
  }
  const double v = detail::frobenius_sq(kernels::matmul_tn(yc, xc)) / (xx * yy);
  return std::clamp(v, 0.0, 1.0);
}

/// T x T cosine similarities between per-frame vectors (one row per frame).
/// Pairs involving a zero vector get 0, including its diagonal entry.
inline Tensor frame_redundancy(const Tensor& activations) {
  if (activations.rank() != 2) throw DimensionError("frame_redundancy: expected [T x c]");
  const std::size_t t = activations.rows();
  if (t < 2) throw ConfigError("frame_redundancy: need at least 2 frames");
  std::vector<double> norm(t, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    for (double v : activations.row(i)) norm[i] += v * v;
    norm[i] = std::sqrt(norm[i]);
  }
  Tensor out(Shape{t, t});
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i; j < t; ++j) {
      double c = 0.0;
      if (norm[i] > 0.0 && norm[j] > 0.0) {
        const auto a = activations.row(i), b = activations.row(j);
        for (std::size_t k = 0; k < a.size(); ++k) c += a[k] * b[k];
        c = i == j ? 1.0 : std::clamp(c / (norm[i] * norm[j]), -1.0, 1.0);
      }
      out(i, j) = out(j, i) = c;
    }
  }
  return out;
}

/// Mean of the off-diagonal entries of a square matrix.
inline double mean_off_diagonal(const Tensor& m) {
  if (m.rank() != 2 || m.rows() != m.cols() || m.rows() < 2) {
    throw DimensionError("mean_off_diagonal: need [T x T] with T >= 2");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      if (i != j) s += m(i, j);
  return s / static_cast<double>(m.rows() * (m.rows() - 1));
}

struct MeasuredRatios {
  double space = 1.0;
  /// Mean of the forward and backward op ratios.
  double time = 1.0;
  double forward = 1.0;
  double backward = 1.0;
  /// (F + B) ratio without the balancing.
  double time_total = 1.0;
};

namespace detail {

template <class Map>
std::uint64_t sum_over(const Map& per_layer, std::uint64_t total, const std::set<int>* layers) {
  if (!layers) return total;
  std::uint64_t s = 0;
  for (int l : *layers) {
    auto it = per_layer.find(l);
    if (it != per_layer.end()) s += it->second;
  }
  return s;
}

inline double safe_ratio(std::uint64_t a, std::uint64_t b) {
  if (b == 0) return a == 0 ? 1.0 : std::numeric_limits<double>::infinity();
  return static_cast<double>(a) / static_cast<double>(b);
}

}  // namespace detail

/// Ratios of `sbp` costs to `full` costs. With `layers`, only those tape
/// layer ids are counted.
inline MeasuredRatios cost_ratios(const MemoryStats& full_mem, const OpCounter& full_ops, const MemoryStats& sbp_mem,
                                  const OpCounter& sbp_ops, const std::set<int>* layers = nullptr) {
  using detail::safe_ratio;
  using detail::sum_over;
  MeasuredRatios r;
  r.space = safe_ratio(sum_over(sbp_mem.cached_elements_per_layer, sbp_mem.cached_elements_total, layers),
                       sum_over(full_mem.cached_elements_per_layer, full_mem.cached_elements_total, layers));
  const std::uint64_t fs = sum_over(sbp_ops.forward_per_layer, sbp_ops.forward_elementary_ops, layers);
  const std::uint64_t fe = sum_over(full_ops.forward_per_layer, full_ops.forward_elementary_ops, layers);
  const std::uint64_t bs = sum_over(sbp_ops.backward_per_layer, sbp_ops.backward_elementary_ops, layers);
  const std::uint64_t be = sum_over(full_ops.backward_per_layer, full_ops.backward_elementary_ops, layers);
  r.forward = safe_ratio(fs, fe);
  r.backward = safe_ratio(bs, be);
  r.time = (r.forward + r.backward) / 2.0;
  r.time_total = safe_ratio(fs + bs, fe + be);
  return r;
}

/// cost_ratios of two steps that must come from the same parameters and
/// batch; the parameter shapes and the (exact) forward loss are checked.
inline MeasuredRatios measure_ratios(const StepResult& full, const StepResult& sbp,
                                     const std::set<int>* layers = nullptr) {
  if (full.grads.size() != sbp.grads.size()) throw ContractError("measure_ratios: runs have different parameter sets");
  for (std::size_t i = 0; i < full.grads.size(); ++i) {
    if (full.grads[i].shape() != sbp.grads[i].shape()) {
      throw ContractError("measure_ratios: parameter " + std::to_string(i) + " differs in shape");
    }
  }
  if (std::abs(full.loss - sbp.loss) > 1e-9 * std::max(1.0, std::abs(full.loss))) {
    throw ContractError("measure_ratios: forward losses differ, runs are not on the same model and batch");
  }
  return cost_ratios(full.memory, full.ops, sbp.memory, sbp.ops, layers);
}

}  // namespace stochbp
