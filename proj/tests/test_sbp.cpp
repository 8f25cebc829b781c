// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <set>

#include "stochbp/autograd/ops.hpp"
#include "stochbp/models/step.hpp"
#include "stochbp/models/transformer.hpp"
#include "stochbp/sbp/samplers.hpp"
#include "stochbp/sbp/sbp.hpp"

using namespace stochbp;

namespace {

MiniTransformerConfig toy_config(std::size_t frames, std::size_t layers) {
  MiniTransformerConfig c;
  c.video = {1, frames, 2, 2};
  c.block = {2, 2, false, 1e-5};
  c.layers = layers;
  c.classes = 3;
  return c;
}

struct ToyBatch {
  std::vector<Tensor> clips;
  std::vector<std::size_t> labels;
  Batch view() const {
    Batch b;
    for (const Tensor& c : clips) b.clips.push_back(&c);
    b.labels = labels;
    return b;
  }
};

ToyBatch random_batch(const VideoShape& v, std::size_t n, std::size_t classes, Rng& rng) {
  ToyBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    b.clips.push_back(rng.normal_tensor(v.shape()));
    b.labels.push_back(rng.index(classes));
  }
  return b;
}

}  // namespace

// ------------------------------------------------------------------ samplers

TEST_CASE("uniform sampler draws one node per chunk") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const SampleMask m = sample_uniform(8, 0.25, rng);
    REQUIRE(m.size() == 2);
    CHECK(m.kept()[0] < 4);
    CHECK(m.kept()[1] >= 4);
    CHECK(m.kept()[1] < 8);
  }
  Rng rng(1);
  CHECK(sample_uniform(8, 1.0, rng) == SampleMask::all(8));
  Rng a(42), b(42);
  CHECK(sample_uniform(8, 0.25, a) == sample_uniform(8, 0.25, b));
  CHECK_THROWS_AS(sample_uniform(8, 0.0, rng), ConfigError);
  CHECK_THROWS_AS(sample_uniform(8, -0.5, rng), ConfigError);
  CHECK_THROWS_AS(sample_uniform(8, 1.5, rng), ConfigError);
}

TEST_CASE("keep count rounds half up and clamps") {
  CHECK(keep_count(8, 0.25) == 2);
  CHECK(keep_count(12, 0.125) == 2);
  CHECK(keep_count(3, 0.5) == 2);
  CHECK(keep_count(4, 0.1) == 1);
  CHECK(keep_count(1, 0.125) == 1);
  CHECK(keep_count(10, 1.0) == 10);
}

TEST_CASE("diverse feature sampler chunks by norm") {
  const Tensor f = Tensor::matrix({{1, 0}, {10, 0}, {0, 2}, {0, -9}});
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng(seed);
    const SampleMask m = sample_diverse_feature(f, 0.5, rng);
    REQUIRE(m.size() == 2);
    const std::set<std::size_t> kept(m.kept().begin(), m.kept().end());
    CHECK((kept.count(0) + kept.count(2)) == 1);
    CHECK((kept.count(1) + kept.count(3)) == 1);
  }
  Rng rng(3);
  CHECK_THROWS_AS(sample_diverse_feature(f, 0.5, rng, 5), IndexError);
}

TEST_CASE("diverse samplers with tied keys match uniform sampling") {
  const Tensor f(Shape{10, 3}, 1.0);
  const Tensor g(Shape{10}, 0.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng a(seed), b(seed), c(seed);
    const SampleMask u = sample_uniform(10, 0.3, a);
    CHECK(sample_diverse_feature(f, 0.3, b) == u);
    CHECK(sample_diverse_grad(g, 0.3, c) == u);
  }
}

TEST_CASE("diverse grad sampler chunks by magnitude") {
  const Tensor g = Tensor::vector({0, 0, 5, 5});
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng(seed);
    const SampleMask m = sample_diverse_grad(g, 0.5, rng);
    REQUIRE(m.size() == 2);
    CHECK(m.kept()[0] < 2);
    CHECK(m.kept()[1] >= 2);
  }
  Rng a(9), b(9);
  CHECK(sample_diverse_grad(Tensor::vector({3, 1, 4, 1, 5, 9}), 0.5, a) ==
        sample_diverse_grad(Tensor::vector({3, 1, 4, 1, 5, 9}), 0.5, b));
}

TEST_CASE("checkerboard pattern") {
  const SampleMask half = sample_checkerboard3d({2, 2, 2}, 0.5);
  REQUIRE(half.size() == 4);
  for (std::size_t idx : half.kept()) {
    const std::size_t t = idx / 4, h = (idx / 2) % 2, w = idx % 2;
    CHECK((t + h + w) % 2 == 0);
  }
  CHECK(sample_checkerboard3d({2, 2, 2}, 0.25).kept() == std::vector<std::size_t>{0, 3});
  CHECK(sample_checkerboard3d({2, 2, 2}, 0.125).kept() == std::vector<std::size_t>{0});
  for (double r : {0.5, 0.25, 0.125}) CHECK(sample_checkerboard3d({1, 1, 1}, r).kept() == std::vector<std::size_t>{0});
  CHECK(half.axis() == MaskAxis::spatiotemporal);
  try {
    sample_checkerboard3d({2, 2, 2}, 0.3);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("0.5, 0.25, 0.125") != std::string::npos);
  }
}

TEST_CASE("all samplers honor the cardinality rule") {
  Rng meta(77);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + meta.index(40);
    const double r = meta.uniform(0.01, 1.0);
    const std::size_t k = keep_count(n, r);
    Rng a(trial), b(trial), c(trial);
    CHECK(sample_uniform(n, r, a).size() == k);
    CHECK(sample_diverse_feature(meta.normal_tensor({n, 3}), r, b).size() == k);
    CHECK(sample_diverse_grad(meta.uniform_tensor({n}, 0, 1), r, c).size() == k);
    const std::array<std::size_t, 3> dims{1 + meta.index(4), 1 + meta.index(4), 1 + meta.index(4)};
    const double cr = std::array<double, 3>{0.5, 0.25, 0.125}[meta.index(3)];
    CHECK(sample_checkerboard3d(dims, cr).size() == keep_count(dims[0] * dims[1] * dims[2], cr));
  }
}

TEST_CASE("frame masks expand to every patch of a kept frame") {
  const SampleMask m = expand_frame_mask(SampleMask(3, {0, 2}), 4);
  CHECK(m.total_nodes() == 12);
  CHECK(m.kept() == std::vector<std::size_t>{0, 1, 2, 3, 8, 9, 10, 11});
}

// ------------------------------------------------------------------ sbp_wrap

TEST_CASE("wrapped elementwise square keeps only sampled gradients") {
  const RegionBody square = [](Tape&, std::span<const Var> in, const RowSelection&) { return ops::square(in[0]); };
  for (bool recompute : {true, false}) {
    Tape t;
    const Var x = t.leaf(Tensor::vector({1, 2, 3, 4}), true);
    const auto wrapped = sbp_wrap("square", square, SampleMask(4, {0, 2}), {true, recompute});
    const Var y = wrapped(t, {{x, InputRole::node_axis}});
    CHECK(y.value() == Tensor::vector({1, 4, 9, 16}));
    CHECK(t.backward(ops::sum(y)).at(x) == Tensor::vector({2, 0, 6, 0}));
  }
}

TEST_CASE("full mask reproduces plain gradients") {
  Rng rng(5);
  const Tensor xv = rng.normal_tensor({5, 3});
  const Tensor wv = rng.normal_tensor({3, 3});
  const RegionBody body = [](Tape&, std::span<const Var> in, const RowSelection&) {
    return ops::gelu(ops::matmul(in[0], in[1]));
  };
  Tape plain;
  const Var px = plain.leaf(xv, true);
  const Var pw = plain.parameter(wv);
  const Gradients gp = plain.backward(ops::sum(ops::square(ops::gelu(ops::matmul(px, pw)))));

  Tape t;
  const Var x = t.leaf(xv, true);
  const Var w = t.parameter(wv);
  const Var y = sbp_wrap("f", body, SampleMask::all(5))(t, {{x, InputRole::node_axis}, {w, InputRole::param}});
  const Gradients g = t.backward(ops::sum(ops::square(y)));
  CHECK(max_abs_diff(g.at(x), gp.at(px)) < 1e-12);
  CHECK(max_abs_diff(g.at(w), gp.at(pw)) < 1e-12);
}

TEST_CASE("wrapped attention matches the masked oracle") {
  Rng rng(8);
  const BlockShape s{1, 3, false, 1e-5};
  const Tensor xv = rng.normal_tensor({3, 3});
  std::vector<Tensor> pv{Tensor(Shape{3}, 1.0), Tensor(Shape{3}), init_weight(rng, 3, 3), init_weight(rng, 3, 3),
                         init_weight(rng, 3, 3)};
  const Tensor wout = rng.normal_tensor({3, 3});
  auto inputs = [&](Tape& t, Var x) {
    std::vector<RegionInput> in{{x, InputRole::side}};
    for (const Tensor& p : pv) in.push_back({t.parameter(p), InputRole::param});
    return in;
  };

  Tape ot;
  const Var ox = ot.leaf(xv, true);
  const auto oin = inputs(ot, ox);
  std::vector<Var> ovars;
  for (const auto& i : oin) ovars.push_back(i.var);
  const Var oy = attention_body(s)(ot, ovars, RowSelection{3, std::nullopt});
  ot.tag_layer_output(oy, 0);
  const Gradients og = ot.masked_backward(ops::sum(ops::mul(oy, ot.leaf(wout))), SampleMask(3, {0}), {0});

  for (bool recompute : {true, false}) {
    Tape t;
    const Var x = t.leaf(xv, true);
    const auto in = inputs(t, x);
    const Var y = sbp_wrap("attn", attention_body(s), SampleMask(3, {0}), {true, recompute})(t, in);
    CHECK(max_abs_diff(y.value(), oy.value()) < 1e-12);
    const Gradients g = t.backward(ops::sum(ops::mul(y, t.leaf(wout))));
    CHECK(max_rel_diff(g.at(x), og.at(ox)) < 1e-9);
    for (std::size_t i = 1; i < in.size(); ++i) CHECK(max_rel_diff(g.at(in[i].var), og.at(oin[i].var)) < 1e-9);
  }
}

TEST_CASE("wrapper errors") {
  const RegionBody id = [](Tape&, std::span<const Var> in, const RowSelection&) { return ops::scale(in[0], 1.0); };
  Tape t;
  const Var x = t.leaf(Tensor(Shape{4, 2}, 1.0), true);
  CHECK_THROWS_AS(sbp_wrap("f", id, SampleMask(5, {0}))(t, {{x, InputRole::node_axis}}), IndexError);
  const auto w = sbp_wrap("f", id, SampleMask(4, {0}));
  CHECK_THROWS_AS(w.make_region()->backward(Tensor(Shape{4, 2})), StateError);
}

TEST_CASE("uncached side inputs are cut down to the mask") {
  Rng rng(12);
  const BlockShape s{1, 2, false, 1e-5};
  const Tensor xv = rng.normal_tensor({4, 2});
  Tape full, cut;
  std::vector<RegionInput> fin{{full.leaf(xv, true), InputRole::side}}, cin{{cut.leaf(xv, true), InputRole::side}};
  for (int i = 0; i < 2; ++i) {
    fin.push_back({full.parameter(Tensor(Shape{2}, i == 0 ? 1.0 : 0.0)), InputRole::param});
    cin.push_back({cut.parameter(Tensor(Shape{2}, i == 0 ? 1.0 : 0.0)), InputRole::param});
  }
  for (int i = 0; i < 3; ++i) {
    const Tensor w = init_weight(rng, 2, 2);
    fin.push_back({full.parameter(w), InputRole::param});
    cin.push_back({cut.parameter(w), InputRole::param});
  }
  const SampleMask m(4, {1, 3});
  sbp_wrap("a", attention_body(s), m, {true, true})(full, fin);
  sbp_wrap("a", attention_body(s), m, {false, true})(cut, cin);
  CHECK(full.memory_stats().cached_elements_total == 8);
  CHECK(cut.memory_stats().cached_elements_total == 4);
}

// ------------------------------------------------------------------ model plan

TEST_CASE("apply_sbp_to_model shares one mask across wrapped units") {
  Rng rng(1);
  const MiniVideoTransformer model(toy_config(8, 4), rng);
  SbpConfig cfg;
  cfg.keep_ratio = 0.25;
  cfg.boundary = 3;
  Rng step(2);
  const SbpPlan plan = apply_sbp_to_model(model, cfg, step);
  CHECK(plan.boundary() == 3);
  for (int u = 0; u < 3; ++u) CHECK(plan.mask_for(u).get() == plan.mask().get());
  CHECK_FALSE(plan.wrapped(3));
  CHECK(plan.policy(3).kind == CacheKind::full);
  CHECK(plan.mask()->size() == 2);

  cfg.independent_per_layer = true;
  Rng step2(2);
  const SbpPlan indep = apply_sbp_to_model(model, cfg, step2);
  CHECK(indep.mask_for(1).get() != indep.mask_for(0).get());

  cfg.boundary = 5;
  CHECK_THROWS_AS(apply_sbp_to_model(model, cfg, step), ConfigError);
  cfg.boundary.reset();
  CHECK(apply_sbp_to_model(model, cfg, step).boundary() == 1);
}

TEST_CASE("model-level SBP against the dense masked oracle") {
  Rng rng(21);
  const MiniVideoTransformer model(toy_config(8, 3), rng);
  const ToyBatch batch = random_batch(model.config().video, 2, 3, rng);
  for (int boundary : {1, 2, 3}) {
    for (bool ck : {false, true}) {
      SbpConfig cfg;
      cfg.keep_ratio = 0.5;
      cfg.boundary = boundary;
      cfg.checkpoint = ck;
      Rng step(boundary);
      const SbpPlan plan = apply_sbp_to_model(model, cfg, step);
      const StepResult sbp = train_step(model, batch.view(), plan);
      const StepResult ref = masked_oracle_step(model, batch.view(), *plan.mask(), boundary);
      CHECK(std::abs(sbp.loss - ref.loss) < 1e-12);
      for (std::size_t i = 0; i < sbp.grads.size(); ++i) {
        INFO("boundary " << boundary << " checkpoint " << ck << " param " << model.params().name(i));
        CHECK(max_rel_diff(sbp.grads[i], ref.grads[i]) < 1e-9);
      }
    }
  }
}

TEST_CASE("keep ratio one and boundary zero reduce to end-to-end training") {
  Rng rng(4);
  const MiniVideoTransformer model(toy_config(8, 4), rng);
  const ToyBatch batch = random_batch(model.config().video, 2, 3, rng);
  const StepResult e2e = train_step(model, batch.view(), SbpPlan::none());

  SbpConfig cfg;
  cfg.keep_ratio = 1.0;
  cfg.boundary = 4;
  Rng step(0);
  const StepResult full = train_step(model, batch.view(), apply_sbp_to_model(model, cfg, step));
  for (std::size_t i = 0; i < e2e.grads.size(); ++i) CHECK(max_abs_diff(full.grads[i], e2e.grads[i]) < 1e-12);

  cfg.keep_ratio = 0.25;
  cfg.boundary = 0;
  const StepResult none = train_step(model, batch.view(), apply_sbp_to_model(model, cfg, step));
  CHECK(none.memory.cached_elements_total == e2e.memory.cached_elements_total);
  for (std::size_t i = 0; i < e2e.grads.size(); ++i) CHECK(none.grads[i] == e2e.grads[i]);
}

TEST_CASE("cached elements grow with the keep ratio") {
  Rng rng(6);
  const MiniVideoTransformer model(toy_config(16, 4), rng);
  const ToyBatch batch = random_batch(model.config().video, 1, 3, rng);
  for (bool ck : {false, true}) {
    std::uint64_t prev = 0;
    for (double r : {0.125, 0.25, 0.5, 0.75, 1.0}) {
      SbpConfig cfg;
      cfg.keep_ratio = r;
      cfg.boundary = 4;
      cfg.checkpoint = ck;
      Rng step(1);
      const StepResult s = train_step(model, batch.view(), apply_sbp_to_model(model, cfg, step));
      CHECK(s.memory.cached_elements_total >= prev);
      prev = s.memory.cached_elements_total;
    }
  }
}

TEST_CASE("sbp with checkpoint at r=1 charges what plain checkpointing charges") {
  Rng rng(7);
  const BlockShape shape{2, 2, false, 1e-5};
  ParamSet ps;
  const BlockParamIds id = add_block_params(ps, rng, shape, "b", 0);
  const Tensor xv = rng.normal_tensor({8, 4});
  auto charge = [&](const CachePolicy& policy) {
    Tape t;
    const auto p = ps.bind(t);
    transformer_block(t, t.leaf(xv, true), p, id, shape, policy);
    return t.memory_stats().cached_elements_total;
  };
  auto all = std::make_shared<const SampleMask>(SampleMask::all(8));
  CHECK(charge(CachePolicy::sampled_recompute(all)) == charge(CachePolicy::recompute()));
  CHECK(charge(CachePolicy::sampled(all)) == charge(CachePolicy::full()));
}

TEST_CASE("sbp runs are deterministic") {
  auto run = [] {
    Rng rng(11);
    const MiniVideoTransformer model(toy_config(8, 4), rng);
    const ToyBatch batch = random_batch(model.config().video, 2, 3, rng);
    SbpConfig cfg;
    cfg.keep_ratio = 0.25;
    Rng step(5);
    const SbpPlan plan = apply_sbp_to_model(model, cfg, step);
    return std::make_pair(*plan.mask(), train_step(model, batch.view(), plan));
  };
  const auto [m1, s1] = run();
  const auto [m2, s2] = run();
  CHECK(m1 == m2);
  CHECK(s1.memory.cached_elements_total == s2.memory.cached_elements_total);
  for (std::size_t i = 0; i < s1.grads.size(); ++i) CHECK(s1.grads[i] == s2.grads[i]);
}

TEST_CASE("diverse samplers draw from model signals") {
  Rng rng(13);
  const MiniVideoTransformer model(toy_config(8, 4), rng);
  const ToyBatch batch = random_batch(model.config().video, 2, 3, rng);
  SbpConfig cfg;
  cfg.keep_ratio = 0.5;
  cfg.sampler = SamplerKind::diverse_feature;
  Rng step(1);
  CHECK_THROWS_AS(apply_sbp_to_model(model, cfg, step), StateError);
  const Tensor feats = boundary_features(model, batch.view(), 1);
  CHECK(feats.shape() == Shape{8, 2});
  SamplerInputs in;
  in.features = &feats;
  CHECK(apply_sbp_to_model(model, cfg, step, in).mask()->size() == 4);

  cfg.sampler = SamplerKind::diverse_grad;
  const SbpPlan plan = apply_sbp_to_model(model, cfg, step);
  const StepResult s = train_step(model, batch.view(), plan, model.boundary_layer_id(1));
  CHECK(s.boundary_grad_magnitudes.numel() == 8);
  in.grad_magnitudes = &s.boundary_grad_magnitudes;
  CHECK(apply_sbp_to_model(model, cfg, step, in).mask()->size() == 4);
}

TEST_CASE("checkerboard masks cover the token grid of a patched model") {
  Rng rng(2);
  MiniTransformerConfig c = toy_config(4, 2);
  c.video = {1, 4, 4, 4};
  c.patch_h = 2;
  c.patch_w = 2;
  const MiniVideoTransformer model(c, rng);
  CHECK(model.token_count() == 16);
  SbpConfig cfg;
  cfg.keep_ratio = 0.25;
  cfg.sampler = SamplerKind::checkerboard3d;
  cfg.boundary = 1;
  Rng step(0);
  const SbpPlan plan = apply_sbp_to_model(model, cfg, step);
  CHECK(plan.mask()->total_nodes() == 16);
  CHECK(plan.mask()->size() == 4);
  cfg.sampler = SamplerKind::uniform_random;
  const SbpPlan temporal = apply_sbp_to_model(model, cfg, step);
  CHECK(temporal.mask()->size() == 4);
  // Temporal sampling keeps whole frames.
  CHECK(temporal.mask()->kept()[0] % 4 == 0);
  CHECK(temporal.mask()->kept()[1] == temporal.mask()->kept()[0] + 1);
}
