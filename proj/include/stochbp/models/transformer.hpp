// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

// Pre-norm transformer block without an output projection:
//
//   x1 = x + Attn(LN1(x))          Q, K, V = LN1(x) Wq, Wk, Wv
//   y  = x1 + W2 gelu(W1 LN2(x1) + b1) + b2
//
// Full-cache charge per block, h heads of width d over n tokens:
//   x, LN1(x), Q, K, V                5hdn
//   scores and probabilities          2hn^2   (softmax keeps its logits)
//   x1, LN2(x1), W1 out, gelu out    10hdn
// for 15hdn + 2hn^2. Under a sampled policy only Q, the attention rows and
// the MLP chain shrink with the mask, giving 4hdn + 11hdnr + 2hn^2 r.

#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "stochbp/autograd/ops.hpp"
#include "stochbp/autograd/region.hpp"
#include "stochbp/models/common.hpp"
#include "stochbp/sbp/sbp.hpp"

namespace stochbp {

struct BlockShape {
  std::size_t heads = 2;
  std::size_t head_dim = 4;
  bool causal = false;
  double eps = 1e-5;

  std::size_t width() const noexcept { return heads * head_dim; }
};

struct BlockParamIds {
  std::size_t ln1_g, ln1_b, wq, wk, wv, ln2_g, ln2_b, w1, b1, w2, b2;
};

inline BlockParamIds add_block_params(ParamSet& ps, Rng& rng, const BlockShape& s, const std::string& prefix,
                                      int unit) {
  const std::size_t w = s.width();
  BlockParamIds id{};
  id.ln1_g = ps.add(prefix + ".ln1.gamma", Tensor(Shape{w}, 1.0), unit);
  id.ln1_b = ps.add(prefix + ".ln1.beta", Tensor(Shape{w}), unit);
  id.wq = ps.add(prefix + ".wq", init_weight(rng, w, w), unit);
  id.wk = ps.add(prefix + ".wk", init_weight(rng, w, w), unit);
  id.wv = ps.add(prefix + ".wv", init_weight(rng, w, w), unit);
  id.ln2_g = ps.add(prefix + ".ln2.gamma", Tensor(Shape{w}, 1.0), unit);
  id.ln2_b = ps.add(prefix + ".ln2.beta", Tensor(Shape{w}), unit);
  id.w1 = ps.add(prefix + ".fc1.w", init_weight(rng, w, 4 * w), unit);
  id.b1 = ps.add(prefix + ".fc1.b", Tensor(Shape{4 * w}), unit);
  id.w2 = ps.add(prefix + ".fc2.w", init_weight(rng, 4 * w, w), unit);
  id.b2 = ps.add(prefix + ".fc2.b", Tensor(Shape{w}), unit);
  return id;
}

/// Inputs: x (side), ln1 gamma, ln1 beta, Wq, Wk, Wv. Queries and the
/// residual are restricted to the selected rows; keys and values use all.
inline RegionBody attention_body(const BlockShape& s) {
  return [s](Tape&, std::span<const Var> in, const RowSelection& sel) {
    const Var x = in[0];
    const Var xh = ops::layer_norm(x, in[1], in[2], s.eps);
    const Var q = ops::linear(xh, in[3], std::nullopt, sel.kept);
    const Var k = ops::linear(xh, in[4]);
    const Var v = ops::linear(xh, in[5]);
    const double scale = 1.0 / std::sqrt(static_cast<double>(s.head_dim));
    const Var p = ops::softmax_rows(ops::attention_scores(q, k, s.heads, scale, s.causal, sel.positions()));
    const Var o = ops::attention_context(p, v);
    const Var res = sel.all() ? x : ops::gather_rows(x, *sel.kept);
    return ops::add(res, o);
  };
}

/// Inputs: x1 (node axis), ln2 gamma, ln2 beta, W1, b1, W2, b2. Row-wise.
inline RegionBody mlp_body(const BlockShape& s) {
  return [s](Tape&, std::span<const Var> in, const RowSelection&) {
    const Var x1 = in[0];
    const Var h = ops::gelu(ops::linear(ops::layer_norm(x1, in[1], in[2], s.eps), in[3], in[4]));
    return ops::add(x1, ops::linear(h, in[5], in[6]));
  };
}

inline Var transformer_block(Tape& tape, Var x, const std::vector<Var>& p, const BlockParamIds& id,
                             const BlockShape& s, const CachePolicy& policy) {
  if (x.value().rank() != 2 || x.value().cols() != s.width()) {
    throw DimensionError("transformer block expects [n x " + std::to_string(s.width()) + "], got " +
                         shape_str(x.shape()));
  }
  const Var x1 = run_region(tape, policy, "attention", attention_body(s),
                            {{x, InputRole::side},
                             {p[id.ln1_g], InputRole::param},
                             {p[id.ln1_b], InputRole::param},
                             {p[id.wq], InputRole::param},
                             {p[id.wk], InputRole::param},
                             {p[id.wv], InputRole::param}});
  return run_region(tape, policy, "mlp", mlp_body(s),
                    {{x1, InputRole::node_axis},
                     {p[id.ln2_g], InputRole::param},
                     {p[id.ln2_b], InputRole::param},
                     {p[id.w1], InputRole::param},
                     {p[id.b1], InputRole::param},
                     {p[id.w2], InputRole::param},
                     {p[id.b2], InputRole::param}});
}

/// Output of one sample's forward pass.
struct SampleOutput {
  Var loss;
  Var logits;
  /// Outputs tagged with layer ids 0 .. layer_count()-2 (head excluded).
  std::vector<Var> layer_outputs;
};

struct MiniTransformerConfig {
  VideoShape video;
  /// Patch size; 0 means the whole frame (one token per frame).
  std::size_t patch_h = 0;
  std::size_t patch_w = 0;
  BlockShape block;
  std::size_t layers = 4;
  std::size_t classes = 4;
  double pos_init = 0.5;
};

/// Token embedding + L blocks + mean-pooled linear classifier.
///
/// Layer ids on the tape: 0 stem, 1..L blocks, L+1 head. SBP unit u covers
/// block u, and unit 0 also covers the stem; a boundary b wraps units [0, b).
class MiniVideoTransformer {
 public:
  MiniVideoTransformer(MiniTransformerConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    if (cfg_.patch_h == 0) cfg_.patch_h = cfg_.video.height;
    if (cfg_.patch_w == 0) cfg_.patch_w = cfg_.video.width;
    if (cfg_.layers == 0 || cfg_.classes < 2) throw ConfigError("mini transformer needs >= 1 layer and >= 2 classes");
    if (cfg_.video.height % cfg_.patch_h || cfg_.video.width % cfg_.patch_w) {
      throw ConfigError("patch size does not tile the frame");
    }
    const std::size_t w = cfg_.block.width();
    const std::size_t pix = cfg_.video.channels * cfg_.patch_h * cfg_.patch_w;
    emb_w_ = params_.add("stem.w", init_weight(rng, pix, w), 0);
    emb_b_ = params_.add("stem.b", Tensor(Shape{w}), 0);
    pos_ = params_.add("stem.pos", rng.normal_tensor({token_count(), w}, cfg_.pos_init), 0);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      blocks_.push_back(add_block_params(params_, rng, cfg_.block, "block" + std::to_string(l),
                                         static_cast<int>(l)));
    }
    head_w_ = params_.add("head.w", init_weight(rng, w, cfg_.classes), -1);
    head_b_ = params_.add("head.b", Tensor(Shape{cfg_.classes}), -1);
  }

  const MiniTransformerConfig& config() const noexcept { return cfg_; }
  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

  // SbpModel interface.
  int sbp_unit_count() const noexcept { return static_cast<int>(cfg_.layers); }
  int default_boundary() const noexcept { return std::max(0, static_cast<int>(cfg_.layers) - 3); }
  std::size_t frame_count() const noexcept { return cfg_.video.frames; }
  std::size_t patches_per_frame() const noexcept { return grid()[0] * grid()[1]; }
  std::array<std::size_t, 2> patch_grid() const noexcept { return grid(); }

  std::size_t token_count() const noexcept { return cfg_.video.frames * patches_per_frame(); }
  std::size_t layer_count() const noexcept { return cfg_.layers + 2; }

  /// Tape layer ids whose outputs the masked oracle must zero for boundary b.
  std::set<int> masked_layer_ids(int boundary) const {
    std::set<int> ids;
    for (int l = 0; l <= boundary && boundary > 0; ++l) ids.insert(l);
    return ids;
  }

  /// Layer id whose output feeds the first unwrapped unit.
  int boundary_layer_id(int boundary) const noexcept { return boundary; }

  /// `keep_frames`: frame dropout; only these frames enter the model.
  SampleOutput forward_sample(Tape& tape, const std::vector<Var>& p, const Tensor& clip, std::size_t label,
                              const SbpPlan& plan, const std::vector<std::size_t>* keep_frames = nullptr) const {
    if (label >= cfg_.classes) throw IndexError("label " + std::to_string(label) + " out of range");
    Tensor tokens = tokenize(clip, cfg_.video, cfg_.patch_h, cfg_.patch_w);
    SampleOutput out;
    Var pos = p[pos_];
    if (keep_frames) {
      if (plan.boundary() > 0) throw ConfigError("frame dropout cannot be combined with SBP");
      const std::vector<std::size_t> rows = frame_token_rows(*keep_frames);
      tokens = kernels::gather_rows(tokens, rows);
      LayerScope scope(tape, 0);
      pos = ops::gather_rows(pos, rows);
    }
    Var h;
    {
      LayerScope scope(tape, 0);
      const Var tok = tape.leaf(std::move(tokens));
      h = run_region(tape, plan.policy(0), "stem", stem_body(),
                     {{tok, InputRole::node_axis},
                      {p[emb_w_], InputRole::param},
                      {p[emb_b_], InputRole::param},
                      {pos, keep_frames ? InputRole::side : InputRole::param}});
      tape.tag_layer_output(h, 0);
      out.layer_outputs.push_back(h);
    }
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const int id = static_cast<int>(l) + 1;
      LayerScope scope(tape, id);
      h = transformer_block(tape, h, p, blocks_[l], cfg_.block, plan.policy(static_cast<int>(l)));
      tape.tag_layer_output(h, id);
      out.layer_outputs.push_back(h);
    }
    LayerScope scope(tape, static_cast<int>(cfg_.layers) + 1);
    out.logits = ops::linear(ops::mean_rows(h), p[head_w_], p[head_b_]);
    out.loss = ops::cross_entropy(out.logits, {label});
    return out;
  }

  /// Forward only (no gradient recording); logits [1 x classes].
  Tensor predict(const Tensor& clip, const std::vector<std::size_t>* keep_frames = nullptr) const {
    Tape tape;
    tape.set_grad_enabled(false);
    return forward_sample(tape, params_.bind(tape), clip, 0, SbpPlan::none(), keep_frames).logits.value();
  }

 private:
  std::array<std::size_t, 2> grid() const noexcept {
    return {cfg_.video.height / cfg_.patch_h, cfg_.video.width / cfg_.patch_w};
  }

  std::vector<std::size_t> frame_token_rows(const std::vector<std::size_t>& frames) const {
    const std::size_t per = patches_per_frame();
    std::vector<std::size_t> rows;
    for (std::size_t f : frames) {
      if (f >= cfg_.video.frames) throw IndexError("frame " + std::to_string(f) + " out of range");
      for (std::size_t s = 0; s < per; ++s) rows.push_back(f * per + s);
    }
    return rows;
  }

  // Inputs: tokens (node axis), W, b, positional table (one row per token).
  static RegionBody stem_body() {
    return [](Tape&, std::span<const Var> in, const RowSelection& sel) {
      const Var e = ops::linear(in[0], in[1], in[2]);
      const Var pos = sel.all() ? in[3] : ops::gather_rows(in[3], *sel.kept);
      return ops::add(e, pos);
    };
  }

  MiniTransformerConfig cfg_;
  ParamSet params_;
  std::size_t emb_w_ = 0, emb_b_ = 0, pos_ = 0, head_w_ = 0, head_b_ = 0;
  std::vector<BlockParamIds> blocks_;
};

}  // namespace stochbp
