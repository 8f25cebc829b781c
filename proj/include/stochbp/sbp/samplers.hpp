// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

// Node samplers. Every sampler returns exactly keep_count(n, r) nodes.
//
// The chunked samplers split an ordering of the n nodes into k = keep_count
// consecutive, near-equal chunks (boundaries floor(i*n/k)) and draw one node
// uniformly from each. Uniform sampling uses the natural order; the diverse
// samplers first stable-sort nodes by (magnitude, index), so each chunk holds
// nodes of similar magnitude.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "stochbp/errors.hpp"
#include "stochbp/rng.hpp"
#include "stochbp/sample_mask.hpp"
#include "stochbp/tensor.hpp"

namespace stochbp {

inline void check_keep_ratio(double r) {
  if (!(r > 0.0 && r <= 1.0)) throw ConfigError("keep ratio must lie in (0, 1], got " + std::to_string(r));
}

/// clamp(round_half_up(r * n), 1, n).
inline std::size_t keep_count(std::size_t n, double r) {
  check_keep_ratio(r);
  if (n == 0) throw ConfigError("sampler: no candidate nodes");
  // The small bias keeps products like 0.125 * 12 = 1.5 on the upper side of the tie.
  const auto k = static_cast<std::size_t>(std::floor(r * static_cast<double>(n) + 0.5 + 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

namespace detail {

inline std::vector<std::size_t> chunked_pick(const std::vector<std::size_t>& order, std::size_t k, Rng& rng) {
  const std::size_t n = order.size();
  std::vector<std::size_t> kept;
  kept.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t lo = i * n / k;
    const std::size_t hi = (i + 1) * n / k;
    kept.push_back(order[lo + rng.index(hi - lo)]);
  }
  return kept;
}

inline SampleMask sorted_chunk_sample(const std::vector<double>& keys, double r, Rng& rng) {
  const std::size_t k = keep_count(keys.size(), r);
  std::vector<std::size_t> order(keys.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
  return SampleMask(keys.size(), chunked_pick(order, k, rng));
}

}  // namespace detail

inline SampleMask sample_uniform(std::size_t n, double r, Rng& rng) {
  const std::size_t k = keep_count(n, r);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  return SampleMask(n, detail::chunked_pick(order, k, rng));
}

/// Keys are the L2 norms of the rows of `features` [n x c].
inline SampleMask sample_diverse_feature(const Tensor& features, double r, Rng& rng,
                                         std::optional<std::size_t> expected_nodes = std::nullopt) {
  if (features.rank() != 2) throw DimensionError("sample_diverse_feature: features must be [n x c]");
  if (expected_nodes && features.rows() != *expected_nodes) {
    throw IndexError("sample_diverse_feature: " + std::to_string(features.rows()) + " feature rows for " +
                     std::to_string(*expected_nodes) + " nodes");
  }
  std::vector<double> keys(features.rows());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    double s = 0.0;
    for (double v : features.row(i)) s += v * v;
    keys[i] = std::sqrt(s);
  }
  return detail::sorted_chunk_sample(keys, r, rng);
}

/// Keys are caller-supplied gradient magnitudes, one per node.
inline SampleMask sample_diverse_grad(const Tensor& grad_magnitudes, double r, Rng& rng,
                                      std::optional<std::size_t> expected_nodes = std::nullopt) {
  if (expected_nodes && grad_magnitudes.numel() != *expected_nodes) {
    throw IndexError("sample_diverse_grad: " + std::to_string(grad_magnitudes.numel()) + " magnitudes for " +
                     std::to_string(*expected_nodes) + " nodes");
  }
  const auto d = grad_magnitudes.data();
  return detail::sorted_chunk_sample(std::vector<double>(d.begin(), d.end()), r, rng);
}

/// Per-row L2 norms of a gradient matrix [n x c].
inline Tensor row_norms(const Tensor& g) {
  Tensor out(Shape{g.rows()});
  for (std::size_t i = 0; i < g.rows(); ++i) {
    double s = 0.0;
    for (double v : g.row(i)) s += v * v;
    out[i] = std::sqrt(s);
  }
  return out;
}

inline void check_checkerboard_ratio(double r) {
  if (r != 0.5 && r != 0.25 && r != 0.125) {
    throw ConfigError("checkerboard3d supports keep ratios {0.5, 0.25, 0.125}, got " + std::to_string(r));
  }
}

/// Deterministic parity pattern over a (T, H, W) grid, cells in t-major order.
///
/// Cells are ranked by (t+h+w) parity, then t parity, then h parity, then
/// index, and the first keep_count cells are kept. On even grids r = 1/2 keeps
/// the cells with t+h+w even, r = 1/4 additionally requires t even, and
/// r = 1/8 additionally requires h even.
inline SampleMask sample_checkerboard3d(std::array<std::size_t, 3> dims, double r) {
  check_checkerboard_ratio(r);
  const auto [t_n, h_n, w_n] = dims;
  const std::size_t n = t_n * h_n * w_n;
  const std::size_t k = keep_count(n, r);
  using Key = std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>;
  std::vector<Key> cells;
  cells.reserve(n);
  for (std::size_t t = 0; t < t_n; ++t)
    for (std::size_t h = 0; h < h_n; ++h)
      for (std::size_t w = 0; w < w_n; ++w) {
        const std::size_t idx = (t * h_n + h) * w_n + w;
        cells.emplace_back((t + h + w) % 2, t % 2, h % 2, idx);
      }
  std::sort(cells.begin(), cells.end());
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < k; ++i) kept.push_back(std::get<3>(cells[i]));
  return SampleMask(n, std::move(kept), MaskAxis::spatiotemporal, dims);
}

/// Lifts a mask over T frames to the T*S tokens of an S-patch-per-frame grid.
inline SampleMask expand_frame_mask(const SampleMask& frames, std::size_t patches_per_frame) {
  std::vector<std::size_t> kept;
  for (std::size_t f : frames.kept())
    for (std::size_t s = 0; s < patches_per_frame; ++s) kept.push_back(f * patches_per_frame + s);
  return SampleMask(frames.total_nodes() * patches_per_frame, std::move(kept), frames.axis(), frames.grid());
}

}  // namespace stochbp
