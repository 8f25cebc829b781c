// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "stochbp/errors.hpp"

namespace stochbp {

enum class MaskAxis { temporal, spatiotemporal };

/// Node indices whose backward paths are kept for one training step.
class SampleMask {
 public:
  SampleMask() = default;

  SampleMask(std::size_t total_nodes, std::vector<std::size_t> kept, MaskAxis axis = MaskAxis::temporal,
             std::array<std::size_t, 3> grid = {0, 0, 0})
      : total_(total_nodes), kept_(std::move(kept)), axis_(axis), grid_(grid) {
    std::sort(kept_.begin(), kept_.end());
    if (std::adjacent_find(kept_.begin(), kept_.end()) != kept_.end()) {
      throw IndexError("sample mask: duplicate node index");
    }
    if (!kept_.empty() && kept_.back() >= total_) {
      throw IndexError("sample mask: node " + std::to_string(kept_.back()) + " out of range for " +
                       std::to_string(total_) + " nodes");
    }
  }

  static SampleMask all(std::size_t n) {
    std::vector<std::size_t> k(n);
    std::iota(k.begin(), k.end(), std::size_t{0});
    return SampleMask(n, std::move(k));
  }

  std::size_t total_nodes() const noexcept { return total_; }
  const std::vector<std::size_t>& kept() const noexcept { return kept_; }
  std::size_t size() const noexcept { return kept_.size(); }
  bool is_full() const noexcept { return kept_.size() == total_; }
  MaskAxis axis() const noexcept { return axis_; }
  /// (T, H, W) for spatio-temporal masks; zeros otherwise.
  const std::array<std::size_t, 3>& grid() const noexcept { return grid_; }

  bool contains(std::size_t i) const { return std::binary_search(kept_.begin(), kept_.end(), i); }

  double ratio() const noexcept {
    return total_ ? static_cast<double>(kept_.size()) / static_cast<double>(total_) : 0.0;
  }

  friend bool operator==(const SampleMask&, const SampleMask&) = default;

 private:
  std::size_t total_ = 0;
  std::vector<std::size_t> kept_;
  MaskAxis axis_ = MaskAxis::temporal;
  std::array<std::size_t, 3> grid_{0, 0, 0};
};

}  // namespace stochbp
