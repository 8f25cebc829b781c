// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "stochbp/autograd/gradcheck.hpp"
#include "stochbp/autograd/ops.hpp"
#include "stochbp/models/step.hpp"
#include "stochbp/models/stt.hpp"
#include "stochbp/models/transformer.hpp"

using namespace stochbp;

namespace {

struct BlockFixture {
  BlockShape shape;
  ParamSet ps;
  BlockParamIds id{};

  BlockFixture(BlockShape s, std::uint64_t seed) : shape(s) {
    Rng rng(seed);
    id = add_block_params(ps, rng, shape, "b", 0);
    // Non-trivial norm parameters so their gradients are exercised.
    for (std::size_t i : {id.ln1_g, id.ln1_b, id.ln2_g, id.ln2_b, id.b1, id.b2})
      for (double& v : ps.value(i).data()) v += 0.3 * rng.normal();
  }

  Tensor run(const Tensor& x) const {
    Tape t;
    t.set_grad_enabled(false);
    return transformer_block(t, t.leaf(x), ps.bind(t), id, shape, CachePolicy::full()).value();
  }

  std::uint64_t charge(std::size_t n, const CachePolicy& policy) const {
    Tape t;
    Rng rng(1);
    transformer_block(t, t.leaf(rng.normal_tensor({n, shape.width()}), true), ps.bind(t), id, shape, policy);
    return t.memory_stats().cached_elements_total;
  }
};

struct Sample {
  Tensor clip;
  std::size_t label;
  Batch view() const { return Batch{{&clip}, {label}}; }
};

Tensor row_of(const Tensor& t, std::size_t r) {
  const auto v = t.row(r);
  return Tensor(Shape{v.size()}, std::vector<double>(v.begin(), v.end()));
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("tokenize lays out patches frame-major") {
  const VideoShape v{1, 2, 2, 4};
  Tensor clip(v.shape());
  std::iota(clip.data().begin(), clip.data().end(), 0.0);
  const Tensor tok = tokenize(clip, v, 2, 2);
  REQUIRE(tok.shape() == Shape{4, 4});
  CHECK(row_of(tok, 0) == Tensor::vector({0, 1, 4, 5}));
  CHECK(row_of(tok, 1) == Tensor::vector({2, 3, 6, 7}));
  CHECK(row_of(tok, 2) == Tensor::vector({8, 9, 12, 13}));
  CHECK_THROWS_AS(tokenize(clip, v, 3, 2), ConfigError);
  CHECK_THROWS_AS(tokenize(Tensor(Shape{1, 2, 2, 2}), v, 2, 2), DimensionError);
}

TEST_CASE("temporal chunks concatenate consecutive frames") {
  const VideoShape v{2, 4, 1, 1};
  Tensor clip(v.shape());
  std::iota(clip.data().begin(), clip.data().end(), 0.0);  // value = c * 4 + t
  const Tensor c = temporal_chunks(clip, v, 2);
  REQUIRE(c.shape() == Shape{2, 4});
  CHECK(row_of(c, 0) == Tensor::vector({0, 1, 4, 5}));
  CHECK(row_of(c, 1) == Tensor::vector({2, 3, 6, 7}));
  CHECK_THROWS_AS(temporal_chunks(clip, v, 3), DimensionError);
}

TEST_CASE("block cache charges follow the closed forms") {
  for (const auto& [h, d, n] : std::vector<std::array<std::size_t, 3>>{{1, 2, 4}, {2, 4, 8}, {3, 2, 12}, {2, 3, 5}}) {
    const BlockFixture f({h, d, false, 1e-5}, 3);
    INFO("h=" << h << " d=" << d << " n=" << n);
    CHECK(f.charge(n, CachePolicy::full()) == 15 * h * d * n + 2 * h * n * n);
    CHECK(f.charge(n, CachePolicy::recompute()) == 2 * h * d * n);
    CHECK(f.charge(n, CachePolicy::none()) == 0);
    for (std::size_t k = 1; k <= n; ++k) {
      std::vector<std::size_t> kept(k);
      std::iota(kept.begin(), kept.end(), n - k);
      const auto m = std::make_shared<const SampleMask>(n, kept);
      CHECK(f.charge(n, CachePolicy::sampled(m)) == 4 * h * d * n + 11 * h * d * k + 2 * h * n * k);
      CHECK(f.charge(n, CachePolicy::sampled_recompute(m)) == h * d * n + h * d * k);
    }
  }
}

TEST_CASE("block gradients match finite differences") {
  for (bool causal : {false, true}) {
    const BlockFixture f({2, 2, causal, 1e-5}, 9);
    Rng rng(4);
    const Tensor x = rng.normal_tensor({5, 4});
    const Tensor w = rng.normal_tensor({5, 4});
    Tape t;
    const Var xv = t.leaf(x, true);
    const auto p = f.ps.bind(t);
    const Var y = transformer_block(t, xv, p, f.id, f.shape, CachePolicy::full());
    const Gradients g = t.backward(ops::sum(ops::mul(y, t.leaf(w))));

    const Tensor fd = finite_difference_grad([&](const Tensor& xi) { return dot(f.run(xi), w); }, x, 1e-5);
    CHECK(max_rel_diff(g.at(xv), fd) < 1e-6);

    for (std::size_t pi : {f.id.ln1_g, f.id.wq, f.id.wv, f.id.w1, f.id.b2}) {
      const Tensor fdp = finite_difference_grad(
          [&](const Tensor& pv) {
            BlockFixture tmp({2, 2, causal, 1e-5}, 9);
            for (std::size_t i = 0; i < f.ps.size(); ++i) tmp.ps.value(i) = f.ps.value(i);
            tmp.ps.value(pi) = pv;
            return dot(tmp.run(x), w);
          },
          f.ps.value(pi), 1e-5);
      INFO("param " << f.ps.name(pi) << " causal " << causal);
      CHECK(max_rel_diff(g.at(p[pi]), fdp) < 1e-6);
    }
  }
}

TEST_CASE("non-causal blocks are permutation equivariant") {
  const BlockFixture f({2, 3, false, 1e-5}, 2);
  Rng rng(6);
  const Tensor x = rng.normal_tensor({6, 6});
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  const Tensor y = f.run(x);
  const Tensor yp = f.run(kernels::gather_rows(x, perm));
  CHECK(max_abs_diff(yp, kernels::gather_rows(y, perm)) < 1e-12);
}

TEST_CASE("causal blocks ignore later rows") {
  const BlockFixture f({2, 2, true, 1e-5}, 2);
  Rng rng(7);
  Tensor x = rng.normal_tensor({5, 4});
  const Tensor y = f.run(x);
  for (std::size_t c = 0; c < 4; ++c) x(4, c) += 10.0;
  const Tensor y2 = f.run(x);
  for (std::size_t r = 0; r < 4; ++r) CHECK(max_abs_diff(row_of(y, r), row_of(y2, r)) == 0.0);
  CHECK(max_abs_diff(row_of(y, 4), row_of(y2, 4)) > 1e-3);
}

TEST_CASE("block rejects the wrong width") {
  const BlockFixture f({2, 2, false, 1e-5}, 1);
  Tape t;
  CHECK_THROWS_AS(transformer_block(t, t.leaf(Tensor(Shape{3, 5})), f.ps.bind(t), f.id, f.shape, CachePolicy::full()),
                  DimensionError);
}

TEST_CASE("mini transformer forward and errors") {
  Rng rng(1);
  MiniTransformerConfig c;
  c.video = {1, 4, 4, 4};
  c.patch_h = 2;
  c.patch_w = 2;
  c.layers = 2;
  c.classes = 3;
  const MiniVideoTransformer model(c, rng);
  CHECK(model.token_count() == 16);
  CHECK(model.layer_count() == 4);
  CHECK(model.masked_layer_ids(2) == std::set<int>{0, 1, 2});
  CHECK(model.masked_layer_ids(0).empty());
  const Tensor clip = rng.normal_tensor(c.video.shape());
  const Tensor logits = model.predict(clip);
  CHECK(logits.numel() == 3);

  Tape t;
  const auto p = model.params().bind(t);
  const SampleOutput out = model.forward_sample(t, p, clip, 1, SbpPlan::none());
  CHECK(max_abs_diff(out.logits.value(), logits) == 0.0);
  CHECK(out.layer_outputs.size() == 3);
  CHECK_THROWS_AS(model.forward_sample(t, p, clip, 3, SbpPlan::none()), IndexError);
  CHECK_THROWS_AS(model.predict(Tensor(Shape{1, 4, 4, 2})), DimensionError);

  SbpConfig cfg;
  cfg.boundary = 1;
  Rng step(0);
  const SbpPlan plan = apply_sbp_to_model(model, cfg, step);
  const std::vector<std::size_t> keep{0, 2};
  CHECK_THROWS_AS(model.forward_sample(t, p, clip, 0, plan, &keep), ConfigError);
}

TEST_CASE("sbp forward is exact") {
  Rng rng(2);
  MiniTransformerConfig c;
  c.video = {1, 8, 2, 2};
  c.block = {2, 2, false, 1e-5};
  c.layers = 3;
  const MiniVideoTransformer model(c, rng);
  const Sample s{rng.normal_tensor(c.video.shape()), 2};
  const StepResult e2e = train_step(model, s.view(), SbpPlan::none());
  for (bool ck : {false, true}) {
    SbpConfig cfg;
    cfg.keep_ratio = 0.25;
    cfg.boundary = 3;
    cfg.checkpoint = ck;
    Rng step(3);
    const StepResult sbp = train_step(model, s.view(), apply_sbp_to_model(model, cfg, step));
    CHECK(sbp.loss == e2e.loss);
    CHECK(sbp.memory.cached_elements_total < e2e.memory.cached_elements_total);
    // Everything above the boundary is untouched.
    for (std::size_t i = 0; i < model.params().size(); ++i)
      if (model.params().unit(i) < 0) CHECK(max_abs_diff(sbp.grads[i], e2e.grads[i]) < 1e-12);
  }
}

TEST_CASE("frame dropout caches less than sbp at the same keep ratio") {
  Rng rng(3);
  MiniTransformerConfig c;
  c.video = {1, 8, 2, 2};
  c.block = {2, 2, false, 1e-5};
  c.layers = 4;
  const MiniVideoTransformer model(c, rng);
  const Sample s{rng.normal_tensor(c.video.shape()), 0};
  SbpConfig cfg;
  cfg.keep_ratio = 0.25;
  cfg.boundary = 4;
  Rng step(1);
  const SbpPlan plan = apply_sbp_to_model(model, cfg, step);
  const StepResult sbp = train_step(model, s.view(), plan);
  const StepResult fd = frame_dropout_step(model, s.view(), plan.mask()->kept());
  CHECK(fd.memory.cached_elements_total < sbp.memory.cached_elements_total);
  CHECK(fd.ops.forward_elementary_ops < sbp.ops.forward_elementary_ops);
  CHECK(fd.loss != sbp.loss);
}

TEST_CASE("stt spatial gradients form a tree over chunks") {
  Rng rng(5);
  SttConfig c;
  c.video = {1, 8, 2, 2};
  c.chunk = 2;
  c.spatial_hidden = 6;
  c.temporal = {2, 2, true, 1e-5};
  c.classes = 3;
  const SttModel model(c, rng);
  const Sample s{rng.normal_tensor(c.video.shape()), 1};

  // Full reference pass with the gradient at the spatial features.
  Tape ft;
  const auto fp = model.params().bind(ft);
  const SampleOutput fo = model.forward_sample(ft, fp, s.clip, s.label, SbpPlan::none());
  ft.retain_grad(fo.layer_outputs[0]);
  const Gradients fg = ft.backward(fo.loss);
  const Tensor dh = fg.at(fo.layer_outputs[0]);

  SbpConfig cfg;
  cfg.keep_ratio = 0.5;
  Rng step(8);
  const SbpPlan plan = apply_sbp_to_model(model, cfg, step);
  const StepResult sbp = train_step(model, s.view(), plan);
  CHECK(sbp.loss == fo.loss.value().item());

  // Oracle: backpropagate each kept chunk through its own copy of f_s.
  const Tensor chunks = temporal_chunks(s.clip, c.video, c.chunk);
  std::vector<Tensor> want(model.params().size());
  for (std::size_t i = 0; i < want.size(); ++i) want[i] = Tensor(model.params().value(i).shape());
  for (std::size_t k : plan.mask()->kept()) {
    Tape t;
    const auto p = model.params().bind(t);
    const Var x = t.leaf(kernels::gather_rows(chunks, std::vector<std::size_t>{k}));
    const Var h = ops::linear(ops::gelu(ops::linear(ops::layer_norm(x, p[0], p[1], c.temporal.eps), p[2], p[3])),
                              p[4], p[5]);
    const Gradients g = t.backward_from(h, kernels::gather_rows(dh, std::vector<std::size_t>{k}));
    for (std::size_t i = 0; i < 6; ++i) want[i] = kernels::add(want[i], g.at(p[i]));
  }
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    INFO(model.params().name(i));
    if (model.params().unit(i) == 0) {
      CHECK(max_rel_diff(sbp.grads[i], want[i]) < 1e-10);
    } else {
      CHECK(max_abs_diff(sbp.grads[i], fg.at(fp[i])) < 1e-12);
    }
  }

  const StepResult ref = masked_oracle_step(model, s.view(), *plan.mask(), 1);
  for (std::size_t i = 0; i < model.params().size(); ++i) CHECK(max_rel_diff(sbp.grads[i], ref.grads[i]) < 1e-10);
}

TEST_CASE("stt step and helpers") {
  Rng rng(6);
  SttConfig c;
  c.video = {1, 8, 2, 2};
  c.spatial_hidden = 6;
  c.temporal = {1, 4, true, 1e-5};
  c.classes = 2;
  const SttModel model(c, rng);
  CHECK(model.chunk_count() == 4);
  CHECK(model.spatial_features(rng.normal_tensor(c.video.shape())).shape() == Shape{4, 4});
  const Sample s{rng.normal_tensor(c.video.shape()), 0};
  SbpConfig cfg;
  cfg.keep_ratio = 0.25;
  cfg.sampler = SamplerKind::diverse_feature;
  Rng step(0);
  const StepResult r = stt_sbp_step(model, s.view(), cfg, step);
  CHECK(std::isfinite(r.loss));
  cfg.boundary = 0;
  CHECK_THROWS_AS(stt_sbp_step(model, s.view(), cfg, step), ConfigError);
  SttConfig bad = c;
  bad.chunk = 3;
  CHECK_THROWS_AS(SttModel(bad, rng), DimensionError);
  CHECK(stt_forward(s.clip, model).numel() == 2);
}
