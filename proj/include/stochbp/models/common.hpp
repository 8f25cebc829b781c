// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "stochbp/autograd/tape.hpp"
#include "stochbp/errors.hpp"
#include "stochbp/rng.hpp"
#include "stochbp/tensor.hpp"

namespace stochbp {

/// Named trainable tensors, each tagged with the SBP unit it belongs to (-1
/// for parameters outside every unit, e.g. the classifier). Binding hands the
/// tape aliases of the live values, so an optimizer step must not run while a
/// tape is still in use.
class ParamSet {
 public:
  std::size_t add(std::string name, Tensor init, int unit) {
    names_.push_back(std::move(name));
    units_.push_back(unit);
    values_.push_back(std::make_shared<Tensor>(std::move(init)));
    return values_.size() - 1;
  }

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  int unit(std::size_t i) const { return units_.at(i); }
  const Tensor& value(std::size_t i) const { return *values_.at(i); }
  Tensor& value(std::size_t i) { return *values_.at(i); }

  std::vector<Var> bind(Tape& tape) const {
    std::vector<Var> vars;
    vars.reserve(values_.size());
    for (const auto& v : values_) vars.push_back(tape.parameter(std::shared_ptr<const Tensor>(v)));
    return vars;
  }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v->numel();
    return n;
  }

  /// Deep copy (the copy's tensors are independent of this set).
  ParamSet clone() const {
    ParamSet out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], *values_[i], units_[i]);
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<int> units_;
  std::vector<std::shared_ptr<Tensor>> values_;
};

/// Gradients of `vars` in order; parameters without a gradient get zeros.
inline std::vector<Tensor> collect_grads(const Gradients& g, const std::vector<Var>& vars) {
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (const Var& v : vars) out.push_back(g.contains(v) ? g.at(v) : Tensor(v.shape()));
  return out;
}

inline Tensor init_weight(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  return rng.normal_tensor({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

/// Clip geometry. Clips are stored as [C x T x H x W] tensors.
struct VideoShape {
  std::size_t channels = 1;
  std::size_t frames = 16;
  std::size_t height = 4;
  std::size_t width = 4;

  std::size_t frame_size() const noexcept { return channels * height * width; }
  Shape shape() const { return {channels, frames, height, width}; }
};

inline void check_clip(const Tensor& clip, const VideoShape& v) {
  if (clip.shape() != v.shape()) {
    throw DimensionError("clip " + shape_str(clip.shape()) + " does not match " + shape_str(v.shape()));
  }
}

/// Patch tokens, frame-major then row-major over the patch grid:
/// [T * (H/ph) * (W/pw)] x [C * ph * pw].
inline Tensor tokenize(const Tensor& clip, const VideoShape& v, std::size_t ph, std::size_t pw) {
  check_clip(clip, v);
  if (ph == 0 || pw == 0 || v.height % ph != 0 || v.width % pw != 0) {
    throw ConfigError("patch " + std::to_string(ph) + "x" + std::to_string(pw) + " does not tile a " +
                      std::to_string(v.height) + "x" + std::to_string(v.width) + " frame");
  }
  const std::size_t gh = v.height / ph, gw = v.width / pw;
  const std::size_t width = v.channels * ph * pw;
  Tensor out(Shape{v.frames * gh * gw, width});
  for (std::size_t t = 0; t < v.frames; ++t)
    for (std::size_t i = 0; i < gh; ++i)
      for (std::size_t j = 0; j < gw; ++j) {
        const std::size_t row = (t * gh + i) * gw + j;
        std::size_t col = 0;
        for (std::size_t c = 0; c < v.channels; ++c)
          for (std::size_t y = 0; y < ph; ++y)
            for (std::size_t x = 0; x < pw; ++x) {
              const std::size_t src = ((c * v.frames + t) * v.height + i * ph + y) * v.width + j * pw + x;
              out(row, col++) = clip[src];
            }
      }
  return out;
}

/// Splits a clip into T/K temporal chunks, one row per chunk holding
/// x[:, iK:(i+1)K] flattened in (c, t, h, w) order.
inline Tensor temporal_chunks(const Tensor& clip, const VideoShape& v, std::size_t k) {
  check_clip(clip, v);
  if (k == 0 || v.frames % k != 0) {
    throw DimensionError("chunk size " + std::to_string(k) + " does not divide " + std::to_string(v.frames) +
                         " frames");
  }
  const std::size_t n = v.frames / k;
  const std::size_t hw = v.height * v.width;
  Tensor out(Shape{n, v.channels * k * hw});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t col = 0;
    for (std::size_t c = 0; c < v.channels; ++c)
      for (std::size_t t = i * k; t < (i + 1) * k; ++t)
        for (std::size_t p = 0; p < hw; ++p) out(i, col++) = clip[(c * v.frames + t) * hw + p];
  }
  return out;
}

/// Outcome of one training step over a batch.
struct StepResult {
  double loss = 0.0;
  std::vector<Tensor> grads;
  MemoryStats memory;
  OpCounter ops;
  std::size_t correct = 0;
  /// Per-node gradient magnitudes at the top wrapped unit's output (batch RMS).
  Tensor boundary_grad_magnitudes;
};

inline std::size_t argmax_row(const Tensor& logits) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.numel(); ++j)
    if (logits[j] > logits[best]) best = j;
  return best;
}

}  // namespace stochbp
