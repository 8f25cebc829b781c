// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

// Spatial-then-temporal model: a clip is cut into T/K chunks, a per-chunk
// MLP encoder f_s maps each chunk to a feature vector, and a causal
// transformer block f_t runs over the chunk features. f_s touches one chunk
// at a time, so its backward graph is a tree over chunks.

#pragma once

#include <array>
#include <set>
#include <string>
#include <vector>

#include "stochbp/autograd/ops.hpp"
#include "stochbp/autograd/region.hpp"
#include "stochbp/models/common.hpp"
#include "stochbp/models/transformer.hpp"
#include "stochbp/sbp/sbp.hpp"

namespace stochbp {

struct SttConfig {
  VideoShape video;
  std::size_t chunk = 2;
  std::size_t spatial_hidden = 32;
  BlockShape temporal{2, 4, true, 1e-5};
  std::size_t classes = 4;
  double pos_init = 0.5;
};

/// Layer ids on the tape: 0 spatial encoder, 1 temporal block, 2 head.
/// The spatial encoder is the single SBP unit.
class SttModel {
 public:
  SttModel(SttConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    if (cfg_.chunk == 0 || cfg_.video.frames % cfg_.chunk != 0) {
      throw DimensionError("chunk size " + std::to_string(cfg_.chunk) + " does not divide " +
                           std::to_string(cfg_.video.frames) + " frames");
    }
    if (cfg_.classes < 2) throw ConfigError("stt model needs >= 2 classes");
    const std::size_t in = chunk_width();
    const std::size_t w = cfg_.temporal.width();
    ln_g_ = params_.add("spatial.ln.gamma", Tensor(Shape{in}, 1.0), 0);
    ln_b_ = params_.add("spatial.ln.beta", Tensor(Shape{in}), 0);
    fc1_w_ = params_.add("spatial.fc1.w", init_weight(rng, in, cfg_.spatial_hidden), 0);
    fc1_b_ = params_.add("spatial.fc1.b", Tensor(Shape{cfg_.spatial_hidden}), 0);
    fc2_w_ = params_.add("spatial.fc2.w", init_weight(rng, cfg_.spatial_hidden, w), 0);
    fc2_b_ = params_.add("spatial.fc2.b", Tensor(Shape{w}), 0);
    pos_ = params_.add("temporal.pos", rng.normal_tensor({chunk_count(), w}, cfg_.pos_init), -1);
    block_ = add_block_params(params_, rng, cfg_.temporal, "temporal.block", -1);
    head_w_ = params_.add("head.w", init_weight(rng, w, cfg_.classes), -1);
    head_b_ = params_.add("head.b", Tensor(Shape{cfg_.classes}), -1);
  }

  const SttConfig& config() const noexcept { return cfg_; }
  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

  std::size_t chunk_count() const noexcept { return cfg_.video.frames / cfg_.chunk; }
  std::size_t chunk_width() const noexcept { return cfg_.video.frame_size() * cfg_.chunk; }

  // SbpModel interface; nodes are chunks.
  int sbp_unit_count() const noexcept { return 1; }
  int default_boundary() const noexcept { return 1; }
  std::size_t frame_count() const noexcept { return chunk_count(); }
  std::size_t patches_per_frame() const noexcept { return 1; }
  std::array<std::size_t, 2> patch_grid() const noexcept { return {1, 1}; }

  std::size_t layer_count() const noexcept { return 3; }
  std::set<int> masked_layer_ids(int boundary) const { return boundary > 0 ? std::set<int>{0} : std::set<int>{}; }
  int boundary_layer_id(int) const noexcept { return 0; }

  /// `keep_frames`: frame dropout over chunks; only these chunks enter the model.
  SampleOutput forward_sample(Tape& tape, const std::vector<Var>& p, const Tensor& clip, std::size_t label,
                              const SbpPlan& plan, const std::vector<std::size_t>* keep_frames = nullptr) const {
    if (label >= cfg_.classes) throw IndexError("label " + std::to_string(label) + " out of range");
    Tensor chunks = temporal_chunks(clip, cfg_.video, cfg_.chunk);
    Var pos = p[pos_];
    if (keep_frames) {
      if (plan.boundary() > 0) throw ConfigError("frame dropout cannot be combined with SBP");
      chunks = kernels::gather_rows(chunks, *keep_frames);
      LayerScope scope(tape, 1);
      pos = ops::gather_rows(pos, *keep_frames);
    }
    SampleOutput out;
    Var h;
    {
      LayerScope scope(tape, 0);
      const Var x = tape.leaf(std::move(chunks));
      h = run_region(tape, plan.policy(0), "spatial", spatial_body(cfg_.temporal.eps),
                     {{x, InputRole::node_axis},
                      {p[ln_g_], InputRole::param},
                      {p[ln_b_], InputRole::param},
                      {p[fc1_w_], InputRole::param},
                      {p[fc1_b_], InputRole::param},
                      {p[fc2_w_], InputRole::param},
                      {p[fc2_b_], InputRole::param}});
      tape.tag_layer_output(h, 0);
      out.layer_outputs.push_back(h);
    }
    {
      LayerScope scope(tape, 1);
      h = transformer_block(tape, ops::add(h, pos), p, block_, cfg_.temporal, CachePolicy::full());
      tape.tag_layer_output(h, 1);
      out.layer_outputs.push_back(h);
    }
    LayerScope scope(tape, 2);
    out.logits = ops::linear(ops::mean_rows(h), p[head_w_], p[head_b_]);
    out.loss = ops::cross_entropy(out.logits, {label});
    return out;
  }

  /// Forward only; logits [1 x classes].
  Tensor predict(const Tensor& clip, const std::vector<std::size_t>* keep_frames = nullptr) const {
    Tape tape;
    tape.set_grad_enabled(false);
    return forward_sample(tape, params_.bind(tape), clip, 0, SbpPlan::none(), keep_frames).logits.value();
  }

  /// Spatial features h = {f_s(x_0), ..., f_s(x_n)}, one row per chunk.
  Tensor spatial_features(const Tensor& clip) const {
    Tape tape;
    tape.set_grad_enabled(false);
    return forward_sample(tape, params_.bind(tape), clip, 0, SbpPlan::none()).layer_outputs[0].value();
  }

 private:
  // Inputs: chunks (node axis), LN gamma/beta, fc1 W/b, fc2 W/b. Row-wise.
  static RegionBody spatial_body(double eps) {
    return [eps](Tape&, std::span<const Var> in, const RowSelection&) {
      const Var h = ops::gelu(ops::linear(ops::layer_norm(in[0], in[1], in[2], eps), in[3], in[4]));
      return ops::linear(h, in[5], in[6]);
    };
  }

  SttConfig cfg_;
  ParamSet params_;
  std::size_t ln_g_ = 0, ln_b_ = 0, fc1_w_ = 0, fc1_b_ = 0, fc2_w_ = 0, fc2_b_ = 0, pos_ = 0, head_w_ = 0,
              head_b_ = 0;
  BlockParamIds block_{};
};

/// Convenience: logits of the StT model for one clip.
inline Tensor stt_forward(const Tensor& clip, const SttModel& model) { return model.predict(clip); }

}  // namespace stochbp
