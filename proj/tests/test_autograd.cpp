// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <memory>

#include "stochbp/autograd/gradcheck.hpp"
#include "stochbp/autograd/ops.hpp"
#include "stochbp/autograd/tape.hpp"
#include "stochbp/rng.hpp"

using namespace stochbp;

namespace {

// Relative error normalized by the larger of the two gradients' inf-norms.
double rel_err(const Tensor& a, const Tensor& b) {
  double scale = 1e-8;
  for (double v : a.data()) scale = std::max(scale, std::abs(v));
  for (double v : b.data()) scale = std::max(scale, std::abs(v));
  return max_abs_diff(a, b) / scale;
}

struct Mlp {
  Tensor w1, b1, w2, b2, w3;
};

Mlp make_mlp(Rng& rng) {
  return {rng.normal_tensor({5, 6}, 0.5), rng.normal_tensor({6}, 0.1), rng.normal_tensor({6, 4}, 0.5),
          rng.normal_tensor({4}, 0.1), rng.normal_tensor({4, 3}, 0.5)};
}

Var mlp_loss(Tape& t, const Tensor& x, const Mlp& m, std::vector<Var>* params = nullptr) {
  const Var xv = t.leaf(x);
  const Var w1 = t.parameter(m.w1), b1 = t.parameter(m.b1), w2 = t.parameter(m.w2), b2 = t.parameter(m.b2),
            w3 = t.parameter(m.w3);
  if (params) *params = {w1, b1, w2, b2, w3};
  const Var h1 = ops::gelu(ops::linear(xv, w1, b1));
  const Var h2 = ops::relu(ops::linear(h1, w2, b2));
  const Var logits = ops::matmul(h2, w3);
  return ops::cross_entropy(logits, {0, 2, 1, 2});
}

// Gradient-checks a scalar built from `build` w.r.t. each of `inputs`.
void check_op_gradients(const std::vector<Tensor>& inputs,
                        const std::function<Var(Tape&, const std::vector<Var>&)>& build, double tol) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& x : inputs) vars.push_back(tape.leaf(x, true));
  const Var loss = build(tape, vars);
  const Gradients g = tape.backward(loss);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto f = [&](const Tensor& probe) {
      Tape t;
      std::vector<Var> vs;
      for (std::size_t j = 0; j < inputs.size(); ++j) vs.push_back(t.leaf(j == i ? probe : inputs[j], true));
      return build(t, vs).value().item();
    };
    const Tensor fd = finite_difference_grad(f, inputs[i], 1e-3);
    INFO("input " << i);
    CHECK(rel_err(g.at(vars[i]), fd) < tol);
  }
}

// Weighted sum so that every output element gets a distinct upstream gradient.
Var weighted_sum(Var y, Rng& rng) {
  Tape& t = *y.tape;
  const Var w = t.leaf(rng.normal_tensor(y.shape()));
  return ops::sum(ops::mul(y, w));
}

}  // namespace

TEST_CASE("gradient of sum is all ones") {
  Tape t;
  const Var x = t.leaf(Tensor::vector({1, 2, 3}), true);
  const Gradients g = t.backward(ops::sum(x));
  CHECK(g.at(x) == Tensor::vector({1, 1, 1}));
}

TEST_CASE("gradient of sum of squares") {
  Tape t;
  const Var x = t.leaf(Tensor::vector({1, 2, 3}), true);
  CHECK(t.backward(ops::sum(ops::mul(x, x))).at(x) == Tensor::vector({2, 4, 6}));
  Tape t2;
  const Var y = t2.leaf(Tensor::vector({1, 2, 3}), true);
  CHECK(t2.backward(ops::sum(ops::square(y))).at(y) == Tensor::vector({2, 4, 6}));
}

TEST_CASE("backward rejects a non-scalar loss") {
  Tape t;
  const Var x = t.leaf(Tensor::vector({1, 2}), true);
  CHECK_THROWS_AS(t.backward(ops::square(x)), ContractError);
}

TEST_CASE("unknown op id is a configuration error") {
  Tape t;
  const Var x = t.leaf(Tensor::vector({1}), true);
  CHECK_THROWS_AS(t.record("conv3d", {x}), ConfigError);
}

TEST_CASE("unreached leaves receive zero gradients") {
  Tape t;
  const Var x = t.leaf(Tensor::vector({1, 2}), true);
  const Var y = t.leaf(Tensor::vector({3, 4}), true);
  const Gradients g = t.backward(ops::sum(x));
  CHECK(g.at(y) == Tensor::vector({0, 0}));
}

TEST_CASE("fan-out accumulates gradients") {
  Tape t;
  const Var x = t.leaf(Tensor::vector({1, 2}), true);
  const Var y = ops::add(ops::scale(x, 3.0), ops::square(x));
  CHECK(t.backward(ops::sum(y)).at(x) == Tensor::vector({5, 7}));
}

TEST_CASE("finite differences on simple functions") {
  auto sq = [](const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v * v;
    return s;
  };
  const Tensor g = finite_difference_grad(sq, Tensor::vector({1, 2}), 1e-4);
  CHECK(std::abs(g[0] - 2.0) < 1e-6);
  CHECK(std::abs(g[1] - 4.0) < 1e-6);

  auto soft = [](const Tensor& x) { return kernels::sum(kernels::softmax_rows(x)); };
  const Tensor flat = finite_difference_grad(soft, Tensor::matrix({{0.3, -1.2, 2.0}}), 1e-4);
  for (double v : flat.data()) {
    CHECK(std::abs(v) < 1e-9);
  }
  CHECK_THROWS_AS(finite_difference_grad(sq, Tensor::vector({1}), 0.0), ConfigError);
}

TEST_CASE("three-layer MLP gradients match finite differences") {
  Rng rng(2024);
  const Tensor x = rng.normal_tensor({4, 5});
  const Mlp m = make_mlp(rng);
  Tape tape;
  std::vector<Var> params;
  const Gradients g = tape.backward(mlp_loss(tape, x, m, &params));

  auto with = [&](int which) {
    return [&, which](const Tensor& probe) {
      Mlp mm = m;
      Tensor* slots[] = {&mm.w1, &mm.b1, &mm.w2, &mm.b2, &mm.w3};
      *slots[which] = probe;
      Tape t;
      return mlp_loss(t, x, mm).value().item();
    };
  };
  const Tensor* originals[] = {&m.w1, &m.b1, &m.w2, &m.b2, &m.w3};
  for (int i = 0; i < 5; ++i) {
    const Tensor fd = finite_difference_grad(with(i), *originals[i], 1e-5);
    INFO("parameter " << i);
    CHECK(rel_err(g.at(params[i]), fd) < 1e-6);
  }
}

TEST_CASE("every differentiable op passes a gradient check on random inputs") {
  for (int trial = 0; trial < 10; ++trial) {
    Rng rng(100 + trial);
    const Tensor a = rng.normal_tensor({3, 4});
    const Tensor b = rng.normal_tensor({3, 4});
    const Tensor w = rng.normal_tensor({4, 2});
    const Tensor bias = rng.normal_tensor({2});
    Rng wr = rng.fork(9);

    check_op_gradients({a, b}, [&](Tape&, const std::vector<Var>& v) { Rng r = wr; return weighted_sum(ops::add(v[0], v[1]), r); }, 1e-4);
    check_op_gradients({a, b}, [&](Tape&, const std::vector<Var>& v) { Rng r = wr; return weighted_sum(ops::mul(v[0], v[1]), r); }, 1e-4);
    check_op_gradients({a}, [&](Tape&, const std::vector<Var>& v) { Rng r = wr; return weighted_sum(ops::scale(v[0], -1.7), r); }, 1e-4);
    check_op_gradients({a}, [&](Tape&, const std::vector<Var>& v) { Rng r = wr; return weighted_sum(ops::square(v[0]), r); }, 1e-4);
    check_op_gradients({a, w}, [&](Tape&, const std::vector<Var>& v) { Rng r = wr; return weighted_sum(ops::matmul(v[0], v[1]), r); }, 1e-4);
    check_op_gradients({a, w, bias}, [&](Tape&, const std::vector<Var>& v) {
      Rng r = wr;
      return weighted_sum(ops::linear(v[0], v[1], v[2]), r);
    }, 1e-4);
    check_op_gradients({a, w}, [&](Tape&, const std::vector<Var>& v) {
      Rng r = wr;
      return weighted_sum(ops::linear(v[0], v[1], std::nullopt, std::vector<std::size_t>{2, 0}), r);
    }, 1e-4);
    // Shift away from the kink so central differences stay on one side.
    Tensor shifted = a;
    for (double& v : shifted.data()) v += (v >= 0 ? 0.05 : -0.05);
    check_op_gradients({shifted}, [&](Tape&, const std::vector<Var>& v) { Rng r = wr; return weighted_sum(ops::relu(v[0]), r); }, 1e-4);
    check_op_gradients({a}, [&](Tape&, const std::vector<Var>& v) { Rng r = wr; return weighted_sum(ops::gelu(v[0]), r); }, 1e-4);
    check_op_gradients({a, rng.normal_tensor({4}), rng.normal_tensor({4})}, [&](Tape&, const std::vector<Var>& v) {
      Rng r = wr;
      return weighted_sum(ops::layer_norm(v[0], v[1], v[2]), r);
    }, 1e-4);
    check_op_gradients({a}, [&](Tape&, const std::vector<Var>& v) { Rng r = wr; return weighted_sum(ops::softmax_rows(v[0]), r); }, 1e-4);
    check_op_gradients({a, b}, [&](Tape&, const std::vector<Var>& v) {
      Rng r = wr;
      return weighted_sum(ops::softmax_rows(ops::attention_scores(v[0], v[1], 2, 0.7, trial % 2 == 0)), r);
    }, 1e-4);
    const Tensor p = kernels::softmax_rows(rng.normal_tensor({2, 3, 3}));
    check_op_gradients({p, a}, [&](Tape&, const std::vector<Var>& v) {
      Rng r = wr;
      return weighted_sum(ops::attention_context(v[0], v[1]), r);
    }, 1e-4);
    check_op_gradients({a}, [&](Tape&, const std::vector<Var>& v) {
      Rng r = wr;
      return weighted_sum(ops::gather_rows(v[0], {2, 0, 2}), r);
    }, 1e-4);
    check_op_gradients({a}, [&](Tape&, const std::vector<Var>& v) { Rng r = wr; return weighted_sum(ops::mean_rows(v[0]), r); }, 1e-4);
    check_op_gradients({a}, [&](Tape&, const std::vector<Var>& v) { return ops::cross_entropy(v[0], {1, 3, 0}); }, 1e-4);
  }
}

TEST_CASE("accountant charges follow the cache policy") {
  Rng rng(1);
  SECTION("full matmul charges its two non-parameter inputs") {
    Tape t;
    const Var a = t.leaf(rng.normal_tensor({3, 4}), true);
    const Var b = t.leaf(rng.normal_tensor({4, 2}), true);
    ops::matmul(a, b);
    CHECK(t.memory_stats().cached_elements_total == 12 + 8);
  }
  SECTION("parameters are never charged") {
    Tape t;
    const Var a = t.leaf(rng.normal_tensor({3, 4}), true);
    const Var w = t.parameter(rng.normal_tensor({4, 2}));
    ops::matmul(a, w);
    CHECK(t.memory_stats().cached_elements_total == 12);
  }
  SECTION("policy none charges nothing") {
    Tape t;
    const Var a = t.leaf(rng.normal_tensor({3, 4}), true);
    const Var b = t.leaf(rng.normal_tensor({4, 2}), true);
    const Var y = t.record("matmul", {a, b}, CachePolicy::none());
    CHECK(t.memory_stats().cached_elements_total == 0);
    CHECK_FALSE(y.requires_grad());
  }
  SECTION("a tensor kept by two consumers is charged once") {
    Tape t;
    const Var x = t.leaf(rng.normal_tensor({3, 4}), true);
    ops::square(x);
    ops::relu(x);
    CHECK(t.memory_stats().cached_elements_total == 12);
  }
  SECTION("sampled policy charges the kept rows") {
    Tape full, sampled;
    const Tensor x = rng.normal_tensor({8, 3});
    full.record("square", {full.leaf(x, true)});
    auto mask = std::make_shared<const SampleMask>(8, std::vector<std::size_t>{1, 6});
    sampled.record("square", {sampled.leaf(x, true)}, CachePolicy::sampled(mask));
    CHECK(full.memory_stats().cached_elements_total == 24);
    CHECK(sampled.memory_stats().cached_elements_total == 6);
  }
  SECTION("no charges while gradients are disabled") {
    Tape t;
    const Var x = t.leaf(rng.normal_tensor({3, 4}), true);
    NoGradGuard guard(t);
    ops::square(x);
    CHECK(t.memory_stats().cached_elements_total == 0);
  }
  SECTION("per-layer totals add up") {
    Tape t;
    const Var x = t.leaf(rng.normal_tensor({3, 4}), true);
    Var y = x;
    for (int l = 0; l < 3; ++l) {
      LayerScope scope(t, l);
      y = ops::gelu(y);
    }
    std::uint64_t sum = 0;
    for (const auto& [layer, n] : t.memory_stats().cached_elements_per_layer) sum += n;
    CHECK(sum == t.memory_stats().cached_elements_total);
    CHECK(t.memory_stats().layer(1) == 12);
  }
}

TEST_CASE("masked backward") {
  SECTION("square layer with a partial mask") {
    Tape t;
    const Var x = t.leaf(Tensor::vector({1.5, -2, 3, 0.5}), true);
    const Var y = ops::square(x);
    t.tag_layer_output(y, 0);
    const Gradients g = t.masked_backward(ops::sum(y), SampleMask(4, {0, 2}), {0});
    CHECK(g.at(x) == Tensor::vector({3, 0, 6, 0}));
  }
  Rng rng(17);
  const Tensor x = rng.normal_tensor({5, 4});
  const Tensor w1 = rng.normal_tensor({4, 4});
  const Tensor w2 = rng.normal_tensor({4, 3});
  auto build = [&](Tape& t, Var& p1, Var& p2) {
    const Var xv = t.leaf(x);
    p1 = t.parameter(w1);
    p2 = t.parameter(w2);
    const Var h = ops::gelu(ops::matmul(xv, p1));
    t.tag_layer_output(h, 0);
    return ops::sum(ops::square(ops::matmul(h, p2)));
  };
  SECTION("the full mask equals plain backward bit for bit") {
    Tape a, b;
    Var a1, a2, b1, b2;
    const Gradients ga = a.backward(build(a, a1, a2));
    const Gradients gb = b.masked_backward(build(b, b1, b2), SampleMask::all(5), {0});
    CHECK(ga.at(a1) == gb.at(b1));
    CHECK(ga.at(a2) == gb.at(b2));
  }
  SECTION("the empty mask zeroes gradients below the masked layer") {
    Tape t;
    Var p1, p2;
    const Gradients g = t.masked_backward(build(t, p1, p2), SampleMask(5, {}), {0});
    for (double v : g.at(p1).data()) CHECK(v == 0.0);
    double above = 0.0;
    for (double v : g.at(p2).data()) above += std::abs(v);
    CHECK(above > 0.0);
  }
  SECTION("a mask over the wrong node count is an index error") {
    Tape t;
    Var p1, p2;
    const Var loss = build(t, p1, p2);
    CHECK_THROWS_AS(t.masked_backward(loss, SampleMask(4, {0}), {0}), IndexError);
  }
}

TEST_CASE("checkpointed regions") {
  Rng rng(31);
  const Tensor x = rng.normal_tensor({6, 4});
  const Tensor w1 = rng.normal_tensor({4, 5});
  const Tensor w2 = rng.normal_tensor({5, 3});
  const RegionBody mlp = [](Tape&, std::span<const Var> in, const RowSelection&) {
    return ops::matmul(ops::gelu(ops::matmul(in[0], in[1])), in[2]);
  };

  Tape plain;
  const Var px = plain.leaf(x, true);
  const Var pw1 = plain.parameter(w1), pw2 = plain.parameter(w2);
  std::vector<Var> pin{px, pw1, pw2};
  const Var py = mlp(plain, pin, RowSelection{6, std::nullopt});
  const Gradients gp = plain.backward(ops::sum(ops::square(py)));

  Tape ck;
  const Var cx = ck.leaf(x, true);
  const Var cw1 = ck.parameter(w1), cw2 = ck.parameter(w2);
  const Var cy = checkpoint_region(ck, "mlp", mlp,
                                   {{cx, InputRole::node_axis}, {cw1, InputRole::param}, {cw2, InputRole::param}});
  const std::uint64_t region_charge = ck.memory_stats().cached_elements_total;
  const std::uint64_t fwd_before = ck.op_counter().forward_elementary_ops;
  const Gradients gc = ck.backward(ops::sum(ops::square(cy)));

  CHECK(max_abs_diff(cy.value(), py.value()) < 1e-12);
  CHECK(max_abs_diff(gc.at(cx), gp.at(px)) < 1e-12);
  CHECK(max_abs_diff(gc.at(cw1), gp.at(pw1)) < 1e-12);
  CHECK(max_abs_diff(gc.at(cw2), gp.at(pw2)) < 1e-12);
  CHECK(region_charge == x.numel());
  // Backward re-ran the region forward.
  CHECK(ck.op_counter().forward_elementary_ops > fwd_before);
}

TEST_CASE("region backward before forward is a state error") {
  auto fn = RegionFunction::create("r", [](Tape&, std::span<const Var> in, const RowSelection&) { return in[0]; },
                                   CachePolicy::recompute());
  CHECK_THROWS_AS(fn->backward(Tensor::vector({1})), StateError);
}

TEST_CASE("retained intermediate gradients") {
  Tape t;
  const Var x = t.leaf(Tensor::vector({1, 2}), true);
  const Var y = ops::scale(x, 2.0);
  t.retain_grad(y);
  const Gradients g = t.backward(ops::sum(ops::square(y)));
  CHECK(g.at(y) == Tensor::vector({4, 8}));
}

TEST_CASE("op counter tracks forward and backward work") {
  Tape t;
  const Var a = t.leaf(Tensor(Shape{3, 4}, 1.0), true);
  const Var b = t.leaf(Tensor(Shape{4, 2}, 1.0), true);
  const Var y = ops::matmul(a, b);
  CHECK(t.op_counter().forward_elementary_ops == 24);
  t.backward(ops::sum(y));
  // sum: 6 forward + 6 backward; matmul backward: two products of 24 MACs.
  CHECK(t.op_counter().forward_elementary_ops == 30);
  CHECK(t.op_counter().backward_elementary_ops == 6 + 48);
}
