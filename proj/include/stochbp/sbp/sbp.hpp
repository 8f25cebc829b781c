// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <concepts>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stochbp/autograd/region.hpp"
#include "stochbp/autograd/tape.hpp"
#include "stochbp/errors.hpp"
#include "stochbp/rng.hpp"
#include "stochbp/sample_mask.hpp"
#include "stochbp/sbp/samplers.hpp"

namespace stochbp {

enum class SamplerKind { uniform_random, diverse_feature, diverse_grad, checkerboard3d };

inline std::string to_string(SamplerKind k) {
  switch (k) {
    case SamplerKind::uniform_random: return "uniform_random";
    case SamplerKind::diverse_feature: return "diverse_feature";
    case SamplerKind::diverse_grad: return "diverse_grad";
    case SamplerKind::checkerboard3d: return "checkerboard3d";
  }
  return "?";
}

inline SamplerKind parse_sampler(const std::string& s) {
  if (s == "uniform_random" || s == "uniform") return SamplerKind::uniform_random;
  if (s == "diverse_feature") return SamplerKind::diverse_feature;
  if (s == "diverse_grad") return SamplerKind::diverse_grad;
  if (s == "checkerboard3d") return SamplerKind::checkerboard3d;
  throw ConfigError("unknown sampler '" + s +
                    "' (expected uniform_random, diverse_feature, diverse_grad or checkerboard3d)");
}

struct SbpConfig {
  double keep_ratio = 1.0;
  SamplerKind sampler = SamplerKind::uniform_random;
  /// Number of bottom SBP units that are wrapped; unset means the model default.
  std::optional<int> boundary;
  bool resample_each_step = true;
  /// Draw a separate mask for every wrapped unit instead of sharing one.
  bool independent_per_layer = false;
  /// Cache only kept-node inputs and re-run wrapped units during backward.
  bool checkpoint = false;
  std::uint64_t seed = 0;

  void validate() const {
    check_keep_ratio(keep_ratio);
    if (boundary && *boundary < 0) throw ConfigError("sbp boundary must be non-negative");
  }
};

// ------------------------------------------------------------------ sbp_wrap

struct SbpWrapOptions {
  /// Side inputs (keys/values) are cached whole. When false they are treated
  /// as node-axis inputs and cut down to the mask like everything else, which
  /// changes the re-forward and therefore the gradients.
  bool cache_side_inputs_full = true;
  /// Re-run the wrapped op during backward on cached kept-node inputs (true),
  /// or keep the kept-node sub-graph from forward (false).
  bool recompute = true;
};

/// An op converted to stochastic backpropagation over a fixed mask.
class SbpWrapped {
 public:
  SbpWrapped(std::string label, RegionBody body, std::shared_ptr<const SampleMask> mask, SbpWrapOptions opts)
      : label_(std::move(label)), body_(std::move(body)), mask_(std::move(mask)), opts_(opts) {
    if (!mask_) throw ConfigError("sbp_wrap: missing mask");
  }

  /// Fresh single-use region for one forward/backward pair.
  std::shared_ptr<RegionFunction> make_region() const {
    return RegionFunction::create(label_, body_,
                                  opts_.recompute ? CachePolicy::sampled_recompute(mask_) : CachePolicy::sampled(mask_));
  }

  Var operator()(Tape& tape, std::vector<RegionInput> inputs) const {
    if (!opts_.cache_side_inputs_full) {
      for (RegionInput& in : inputs)
        if (in.role == InputRole::side) in.role = InputRole::node_axis;
    }
    return make_region()->forward(tape, std::move(inputs));
  }

  const SampleMask& mask() const noexcept { return *mask_; }
  const SbpWrapOptions& options() const noexcept { return opts_; }

 private:
  std::string label_;
  RegionBody body_;
  std::shared_ptr<const SampleMask> mask_;
  SbpWrapOptions opts_;
};

inline SbpWrapped sbp_wrap(std::string label, RegionBody f, std::shared_ptr<const SampleMask> mask,
                           SbpWrapOptions opts = {}) {
  return SbpWrapped(std::move(label), std::move(f), std::move(mask), opts);
}

inline SbpWrapped sbp_wrap(std::string label, RegionBody f, const SampleMask& mask, SbpWrapOptions opts = {}) {
  return sbp_wrap(std::move(label), std::move(f), std::make_shared<const SampleMask>(mask), opts);
}

// ------------------------------------------------------------------ model plan

/// Per-step SBP assignment: which units are wrapped and with what mask.
class SbpPlan {
 public:
  SbpPlan() = default;
  SbpPlan(int boundary, std::vector<std::shared_ptr<const SampleMask>> masks, bool checkpoint)
      : boundary_(boundary), masks_(std::move(masks)), checkpoint_(checkpoint) {}

  /// Plan that wraps nothing.
  static SbpPlan none() { return {}; }

  /// Plain gradient checkpointing of the units below `boundary`, no sampling.
  static SbpPlan checkpoint_only(int boundary) {
    if (boundary < 0) throw ConfigError("sbp plan: negative boundary");
    SbpPlan p;
    p.boundary_ = boundary;
    p.checkpoint_ = true;
    return p;
  }

  int boundary() const noexcept { return boundary_; }
  bool wrapped(int unit) const noexcept { return unit >= 0 && unit < boundary_; }

  const std::shared_ptr<const SampleMask>& mask_for(int unit) const {
    if (!wrapped(unit)) throw IndexError("sbp plan: unit " + std::to_string(unit) + " is not wrapped");
    if (masks_.empty()) throw StateError("sbp plan: checkpoint-only plans have no mask");
    return masks_.at(static_cast<std::size_t>(unit));
  }

  /// Mask of the lowest wrapped unit (the shared mask unless masks are independent).
  const std::shared_ptr<const SampleMask>& mask() const {
    if (masks_.empty()) throw StateError("sbp plan wraps no unit");
    return masks_.front();
  }

  CachePolicy policy(int unit) const {
    if (!wrapped(unit)) return CachePolicy::full();
    if (masks_.empty()) return CachePolicy::recompute();
    return checkpoint_ ? CachePolicy::sampled_recompute(mask_for(unit)) : CachePolicy::sampled(mask_for(unit));
  }

  bool checkpoint() const noexcept { return checkpoint_; }
  bool samples() const noexcept { return !masks_.empty(); }

 private:
  int boundary_ = 0;
  std::vector<std::shared_ptr<const SampleMask>> masks_;
  bool checkpoint_ = false;
};

/// What a model must expose to be wrapped.
template <class M>
concept SbpModel = requires(const M& m) {
  { m.sbp_unit_count() } -> std::convertible_to<int>;
  { m.default_boundary() } -> std::convertible_to<int>;
  { m.frame_count() } -> std::convertible_to<std::size_t>;
  { m.patches_per_frame() } -> std::convertible_to<std::size_t>;
  { m.patch_grid() } -> std::convertible_to<std::array<std::size_t, 2>>;
};

/// Signals some samplers need from the current step.
struct SamplerInputs {
  /// Boundary-layer features, one row per token.
  const Tensor* features = nullptr;
  /// Gradient magnitudes, one per token (previous step).
  const Tensor* grad_magnitudes = nullptr;
};

namespace detail {

// Collapses per-token rows to per-frame rows (concatenating a frame's patches).
inline Tensor frame_rows(const Tensor& tokens, std::size_t frames) {
  if (tokens.rows() % frames != 0) throw IndexError("sampler: token rows not divisible by frame count");
  return tokens.reshaped(Shape{frames, tokens.numel() / frames});
}

inline Tensor frame_magnitudes(const Tensor& token_mags, std::size_t frames) {
  const std::size_t per = token_mags.numel() / frames;
  if (per * frames != token_mags.numel()) throw IndexError("sampler: magnitudes not divisible by frame count");
  Tensor out(Shape{frames});
  for (std::size_t f = 0; f < frames; ++f) {
    double s = 0.0;
    for (std::size_t j = 0; j < per; ++j) s += token_mags[f * per + j] * token_mags[f * per + j];
    out[f] = std::sqrt(s);
  }
  return out;
}

}  // namespace detail

/// Draws one mask over the model's token axis.
template <SbpModel M>
SampleMask draw_model_mask(const M& model, const SbpConfig& cfg, Rng& rng, const SamplerInputs& in) {
  const std::size_t frames = model.frame_count();
  const std::size_t per = model.patches_per_frame();
  SampleMask frame_mask;
  switch (cfg.sampler) {
    case SamplerKind::checkerboard3d: {
      const auto g = model.patch_grid();
      return sample_checkerboard3d({frames, g[0], g[1]}, cfg.keep_ratio);
    }
    case SamplerKind::uniform_random:
      frame_mask = sample_uniform(frames, cfg.keep_ratio, rng);
      break;
    case SamplerKind::diverse_feature:
      if (!in.features) throw StateError("diverse_feature sampler needs boundary features");
      frame_mask = sample_diverse_feature(detail::frame_rows(*in.features, frames), cfg.keep_ratio, rng, frames);
      break;
    case SamplerKind::diverse_grad: {
      const Tensor zeros(Shape{frames * per});
      const Tensor& mags = in.grad_magnitudes ? *in.grad_magnitudes : zeros;
      frame_mask = sample_diverse_grad(detail::frame_magnitudes(mags, frames), cfg.keep_ratio, rng, frames);
      break;
    }
  }
  return per == 1 ? frame_mask : expand_frame_mask(frame_mask, per);
}

/// Resolves the boundary and draws this step's mask(s). With a shared mask,
/// every wrapped unit holds the same mask object.
template <SbpModel M>
SbpPlan apply_sbp_to_model(const M& model, const SbpConfig& cfg, Rng& step_rng, const SamplerInputs& in = {}) {
  cfg.validate();
  const int boundary = cfg.boundary.value_or(model.default_boundary());
  if (boundary < 0 || boundary > model.sbp_unit_count()) {
    throw ConfigError("sbp boundary " + std::to_string(boundary) + " outside [0, " +
                      std::to_string(model.sbp_unit_count()) + "]");
  }
  std::vector<std::shared_ptr<const SampleMask>> masks;
  if (boundary > 0) {
    auto shared = std::make_shared<const SampleMask>(draw_model_mask(model, cfg, step_rng, in));
    masks.push_back(shared);
    for (int u = 1; u < boundary; ++u) {
      masks.push_back(cfg.independent_per_layer
                          ? std::make_shared<const SampleMask>(draw_model_mask(model, cfg, step_rng, in))
                          : shared);
    }
  }
  return SbpPlan(boundary, std::move(masks), cfg.checkpoint);
}

}  // namespace stochbp
