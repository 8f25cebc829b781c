// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

// One training step over a batch, shared by both model families. All samples
// of a batch go on one tape, so MemoryStats cover the whole step.

#pragma once

#include <cmath>
#include <set>
#include <vector>

#include "stochbp/autograd/ops.hpp"
#include "stochbp/models/common.hpp"
#include "stochbp/models/stt.hpp"
#include "stochbp/models/transformer.hpp"
#include "stochbp/sbp/sbp.hpp"

namespace stochbp {

struct Batch {
  std::vector<const Tensor*> clips;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return clips.size(); }
};

template <class Model>
concept StepModel = SbpModel<Model> && requires(const Model& m, Tape& t, const std::vector<Var>& p,
                                                const Tensor& x, const SbpPlan& plan) {
  { m.forward_sample(t, p, x, std::size_t{0}, plan, nullptr) } -> std::same_as<SampleOutput>;
  { m.params() } -> std::convertible_to<const ParamSet&>;
  { m.masked_layer_ids(0) } -> std::same_as<std::set<int>>;
  { m.boundary_layer_id(0) } -> std::convertible_to<int>;
};

namespace detail {

struct StepOptions {
  const SbpPlan* plan = nullptr;
  const std::vector<std::size_t>* keep_frames = nullptr;
  /// Dense reference: plain forward, then masked_backward with this mask.
  const SampleMask* oracle_mask = nullptr;
  int oracle_boundary = 0;
  /// Layer id whose output gradient magnitudes are reported (-1: none).
  int retain_layer = -1;
};

template <StepModel Model>
StepResult run_step(const Model& model, const Batch& batch, const StepOptions& opt) {
  if (batch.size() == 0 || batch.labels.size() != batch.size()) throw ConfigError("empty or unlabeled batch");
  const SbpPlan none = SbpPlan::none();
  const SbpPlan& plan = opt.plan ? *opt.plan : none;
  Tape tape;
  const std::vector<Var> p = model.params().bind(tape);
  std::vector<Var> retained;
  std::optional<Var> total;
  StepResult res;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    SampleOutput out = model.forward_sample(tape, p, *batch.clips[i], batch.labels[i], plan, opt.keep_frames);
    if (argmax_row(out.logits.value()) == batch.labels[i]) ++res.correct;
    if (opt.retain_layer >= 0) {
      const Var b = out.layer_outputs.at(static_cast<std::size_t>(opt.retain_layer));
      tape.retain_grad(b);
      retained.push_back(b);
    }
    LayerScope scope(tape, static_cast<int>(model.layer_count()) - 1);
    total = total ? ops::add(*total, out.loss) : out.loss;
  }
  Var loss;
  {
    LayerScope scope(tape, static_cast<int>(model.layer_count()) - 1);
    loss = ops::scale(*total, 1.0 / static_cast<double>(batch.size()));
  }
  res.loss = loss.value().item();
  if (!std::isfinite(res.loss)) throw NumericError("non-finite loss");

  const Gradients g = opt.oracle_mask
                          ? tape.masked_backward(loss, *opt.oracle_mask, model.masked_layer_ids(opt.oracle_boundary))
                          : tape.backward(loss);
  res.grads = collect_grads(g, p);
  res.memory = tape.memory_stats();
  res.ops = tape.op_counter();
  if (!retained.empty()) {
    const std::size_t n = retained.front().value().rows();
    Tensor mags(Shape{n});
    for (const Var& v : retained) {
      const Tensor& gv = g.at(v);
      for (std::size_t r = 0; r < n; ++r)
        for (double x : gv.row(r)) mags[r] += x * x;
    }
    for (double& m : mags.data()) m = std::sqrt(m);
    res.boundary_grad_magnitudes = std::move(mags);
  }
  return res;
}

}  // namespace detail

/// E2E when `plan` wraps nothing, SBP otherwise.
template <StepModel Model>
StepResult train_step(const Model& model, const Batch& batch, const SbpPlan& plan, int retain_layer = -1) {
  return detail::run_step(model, batch, {&plan, nullptr, nullptr, 0, retain_layer});
}

/// Only `keep_frames` enter the model: no forward and no backward for the rest.
template <StepModel Model>
StepResult frame_dropout_step(const Model& model, const Batch& batch, const std::vector<std::size_t>& keep_frames) {
  return detail::run_step(model, batch, {nullptr, &keep_frames, nullptr, 0, -1});
}

/// Dense reference for a shared mask applied below `boundary`.
template <StepModel Model>
StepResult masked_oracle_step(const Model& model, const Batch& batch, const SampleMask& mask, int boundary) {
  return detail::run_step(model, batch, {nullptr, nullptr, &mask, boundary, -1});
}

/// Per-token boundary features for the diverse-feature sampler: for every
/// token, the norms of its boundary-layer row in each sample of the batch
/// ([n x batch]; a row's L2 norm is the batch RMS of the per-sample norms).
template <StepModel Model>
Tensor boundary_features(const Model& model, const Batch& batch, int boundary) {
  Tape tape;
  tape.set_grad_enabled(false);
  const std::vector<Var> p = model.params().bind(tape);
  const int layer = model.boundary_layer_id(boundary);
  Tensor feats;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const SampleOutput out = model.forward_sample(tape, p, *batch.clips[b], batch.labels[b], SbpPlan::none());
    const Tensor& h = out.layer_outputs.at(static_cast<std::size_t>(layer)).value();
    if (feats.empty()) feats = Tensor(Shape{h.rows(), batch.size()});
    for (std::size_t r = 0; r < h.rows(); ++r) {
      double s = 0.0;
      for (double x : h.row(r)) s += x * x;
      feats(r, b) = std::sqrt(s);
    }
  }
  return feats;
}

/// One SBP step of the StT model: Set-1 (masked) chunks get full gradient
/// paths through f_s, the rest contribute features only.
inline StepResult stt_sbp_step(const SttModel& model, const Batch& batch, const SbpConfig& cfg, Rng& step_rng) {
  SbpConfig c = cfg;
  if (!c.boundary) c.boundary = 1;
  if (*c.boundary != 1) throw ConfigError("stt_sbp_step: the spatial encoder must be under SBP (boundary 1)");
  SamplerInputs in;
  Tensor feats;
  if (c.sampler == SamplerKind::diverse_feature) {
    feats = boundary_features(model, batch, 1);
    in.features = &feats;
  }
  const SbpPlan plan = apply_sbp_to_model(model, c, step_rng, in);
  return train_step(model, batch, plan);
}

}  // namespace stochbp
