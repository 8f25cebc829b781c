// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

// Primitive differentiable ops.
//
// Each op declares which of its tensors it keeps for backward (`saved_inputs`,
// `saves_output`). The tape charges exactly those tensors to the activation
// accountant and hands only those tensors to the backward function, so the
// accounting cannot drift from what the gradient code actually reads.
// Parameter tensors may be kept but are never charged.
//
// Elementary-op convention: one multiply-accumulate is one op; every other
// kernel (norms, activations, softmax, adds, gathers, losses) costs one op
// per output element, in both directions.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stochbp/errors.hpp"
#include "stochbp/kernels.hpp"
#include "stochbp/tensor.hpp"

namespace stochbp {

struct OpAttrs {
  double alpha = 1.0;
  double eps = 1e-5;
  std::size_t heads = 1;
  bool causal = false;
  /// Row subset for gather/linear; key-axis positions of the query rows for
  /// attention_scores. nullopt means every row.
  std::optional<std::vector<std::size_t>> rows;
  std::vector<std::size_t> labels;
};

struct BackwardArgs {
  /// Input values; nullptr for inputs the op did not keep.
  std::span<const Tensor* const> inputs;
  /// Output value, or nullptr when the op does not keep it.
  const Tensor* output;
  /// Shapes of every input (metadata, always available).
  std::span<const Shape* const> input_shapes;
  const Tensor& grad_output;
  const OpAttrs& attrs;
  std::span<const bool> needs_grad;
};

/// Shapes only; used for op counting.
struct CostArgs {
  std::span<const Tensor* const> inputs;
  const Tensor& output;
  const OpAttrs& attrs;
  std::span<const bool> needs_grad;
};

struct OpDef {
  std::string name;
  std::size_t min_arity = 1;
  std::size_t max_arity = 1;
  std::function<Tensor(std::span<const Tensor* const>, const OpAttrs&)> forward;
  std::function<std::vector<Tensor>(const BackwardArgs&)> backward;
  std::vector<std::size_t> saved_inputs;
  bool saves_output = false;
  std::function<std::uint64_t(const CostArgs&)> forward_cost;
  std::function<std::uint64_t(const CostArgs&)> backward_cost;
};

namespace detail {

inline std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), std::size_t{0});
  return r;
}

inline std::uint64_t out_elems(const CostArgs& c) { return c.output.numel(); }

inline std::map<std::string, OpDef, std::less<>> build_registry() {
  std::map<std::string, OpDef, std::less<>> reg;
  auto add_op = [&reg](OpDef def) { reg.emplace(def.name, std::move(def)); };

  add_op({.name = "add",
          .min_arity = 2,
          .max_arity = 2,
          .forward = [](auto in, const OpAttrs&) { return kernels::add(*in[0], *in[1]); },
          .backward = [](const BackwardArgs& a) { return std::vector<Tensor>{a.grad_output, a.grad_output}; },
          .saved_inputs = {},
          .forward_cost = out_elems,
          .backward_cost = out_elems});

  add_op({.name = "mul",
          .min_arity = 2,
          .max_arity = 2,
          .forward = [](auto in, const OpAttrs&) { return kernels::mul(*in[0], *in[1]); },
          .backward =
              [](const BackwardArgs& a) {
                std::vector<Tensor> g(2);
                if (a.needs_grad[0]) g[0] = kernels::mul(a.grad_output, *a.inputs[1]);
                if (a.needs_grad[1]) g[1] = kernels::mul(a.grad_output, *a.inputs[0]);
                return g;
              },
          .saved_inputs = {0, 1},
          .forward_cost = out_elems,
          .backward_cost = out_elems});

  add_op({.name = "scale",
          .forward = [](auto in, const OpAttrs& at) { return kernels::scale(*in[0], at.alpha); },
          .backward =
              [](const BackwardArgs& a) { return std::vector<Tensor>{kernels::scale(a.grad_output, a.attrs.alpha)}; },
          .saved_inputs = {},
          .forward_cost = out_elems,
          .backward_cost = out_elems});

  add_op({.name = "square",
          .forward = [](auto in, const OpAttrs&) { return kernels::mul(*in[0], *in[0]); },
          .backward =
              [](const BackwardArgs& a) {
                return std::vector<Tensor>{kernels::scale(kernels::mul(a.grad_output, *a.inputs[0]), 2.0)};
              },
          .saved_inputs = {0},
          .forward_cost = out_elems,
          .backward_cost = out_elems});

  add_op({.name = "matmul",
          .min_arity = 2,
          .max_arity = 2,
          .forward = [](auto in, const OpAttrs&) { return kernels::matmul(*in[0], *in[1]); },
          .backward =
              [](const BackwardArgs& a) {
                std::vector<Tensor> g(2);
                if (a.needs_grad[0]) g[0] = kernels::matmul_nt(a.grad_output, *a.inputs[1]);
                if (a.needs_grad[1]) g[1] = kernels::matmul_tn(*a.inputs[0], a.grad_output);
                return g;
              },
          .saved_inputs = {0, 1},
          .forward_cost = [](const CostArgs& c) -> std::uint64_t { return c.output.numel() * c.inputs[0]->dim(1); },
          .backward_cost =
              [](const CostArgs& c) -> std::uint64_t {
                const std::uint64_t macs = c.output.numel() * c.inputs[0]->dim(1);
                return macs * (std::uint64_t{c.needs_grad[0]} + std::uint64_t{c.needs_grad[1]});
              }});

  // y = x[rows] W (+ b). Keeps x; a row subset reads the kept x in place.
  add_op({.name = "linear",
          .min_arity = 2,
          .max_arity = 3,
          .forward =
              [](auto in, const OpAttrs& at) {
                const Tensor& x = *in[0];
                Tensor y = at.rows ? kernels::matmul(kernels::gather_rows(x, *at.rows), *in[1])
                                   : kernels::matmul(x, *in[1]);
                if (in.size() == 3) y = kernels::add_row_vector(y, *in[2]);
                return y;
              },
          .backward =
              [](const BackwardArgs& a) {
                std::vector<Tensor> g(a.inputs.size());
                const Tensor& x = *a.inputs[0];
                const Tensor& w = *a.inputs[1];
                if (a.needs_grad[0]) {
                  Tensor dx = kernels::matmul_nt(a.grad_output, w);
                  g[0] = a.attrs.rows ? kernels::scatter_rows(dx, *a.attrs.rows, x.rows()) : std::move(dx);
                }
                if (a.needs_grad[1]) {
                  g[1] = a.attrs.rows ? kernels::matmul_tn(kernels::gather_rows(x, *a.attrs.rows), a.grad_output)
                                      : kernels::matmul_tn(x, a.grad_output);
                }
                if (a.inputs.size() == 3 && a.needs_grad[2]) g[2] = kernels::sum_rows(a.grad_output);
                return g;
              },
          .saved_inputs = {0, 1},
          .forward_cost =
              [](const CostArgs& c) -> std::uint64_t {
                return c.output.numel() * c.inputs[1]->dim(0) + (c.inputs.size() == 3 ? c.output.numel() : 0);
              },
          .backward_cost =
              [](const CostArgs& c) -> std::uint64_t {
                const std::uint64_t macs = c.output.numel() * c.inputs[1]->dim(0);
                std::uint64_t total = macs * (std::uint64_t{c.needs_grad[0]} + std::uint64_t{c.needs_grad[1]});
                if (c.inputs.size() == 3 && c.needs_grad[2]) total += c.output.numel();
                return total;
              }});

  add_op({.name = "relu",
          .forward = [](auto in, const OpAttrs&) { return kernels::relu(*in[0]); },
          .backward =
              [](const BackwardArgs& a) { return std::vector<Tensor>{kernels::relu_backward(*a.inputs[0], a.grad_output)}; },
          .saved_inputs = {0},
          .forward_cost = out_elems,
          .backward_cost = out_elems});

  add_op({.name = "gelu",
          .forward = [](auto in, const OpAttrs&) { return kernels::gelu(*in[0]); },
          .backward =
              [](const BackwardArgs& a) { return std::vector<Tensor>{kernels::gelu_backward(*a.inputs[0], a.grad_output)}; },
          .saved_inputs = {0},
          .forward_cost = out_elems,
          .backward_cost = out_elems});

  add_op({.name = "layer_norm",
          .min_arity = 3,
          .max_arity = 3,
          .forward = [](auto in, const OpAttrs& at) { return kernels::layer_norm(*in[0], *in[1], *in[2], at.eps); },
          .backward =
              [](const BackwardArgs& a) {
                auto g = kernels::layer_norm_backward(*a.inputs[0], *a.inputs[1], a.attrs.eps, a.grad_output);
                return std::vector<Tensor>{std::move(g.dx), std::move(g.dgamma), std::move(g.dbeta)};
              },
          .saved_inputs = {0, 1},
          .forward_cost = out_elems,
          .backward_cost = out_elems});

  // Keeps its logits and recomputes the probabilities during backward, so an
  // attention layer holds its weights both before and after normalization.
  add_op({.name = "softmax_rows",
          .forward = [](auto in, const OpAttrs&) { return kernels::softmax_rows(*in[0]); },
          .backward =
              [](const BackwardArgs& a) {
                const Tensor p = kernels::softmax_rows(*a.inputs[0]);
                return std::vector<Tensor>{kernels::softmax_rows_backward(p, a.grad_output)};
              },
          .saved_inputs = {0},
          .forward_cost = out_elems,
          .backward_cost = out_elems});

  add_op({.name = "attention_scores",
          .min_arity = 2,
          .max_arity = 2,
          .forward =
              [](auto in, const OpAttrs& at) {
                const auto pos = at.rows ? *at.rows : all_rows(in[0]->rows());
                return kernels::attention_scores(*in[0], *in[1], at.heads, at.alpha, at.causal, pos);
              },
          .backward =
              [](const BackwardArgs& a) {
                const auto pos = a.attrs.rows ? *a.attrs.rows : all_rows(a.inputs[0]->rows());
                auto g = kernels::attention_scores_backward(*a.inputs[0], *a.inputs[1], a.attrs.heads, a.attrs.alpha,
                                                            a.attrs.causal, pos, a.grad_output);
                return std::vector<Tensor>{std::move(g.first), std::move(g.second)};
              },
          .saved_inputs = {0, 1},
          .forward_cost =
              [](const CostArgs& c) -> std::uint64_t { return c.output.numel() * (c.inputs[0]->dim(1) / c.attrs.heads); },
          .backward_cost =
              [](const CostArgs& c) -> std::uint64_t {
                return 2 * c.output.numel() * (c.inputs[0]->dim(1) / c.attrs.heads);
              }});

  add_op({.name = "attention_context",
          .min_arity = 2,
          .max_arity = 2,
          .forward = [](auto in, const OpAttrs&) { return kernels::attention_context(*in[0], *in[1]); },
          .backward =
              [](const BackwardArgs& a) {
                auto g = kernels::attention_context_backward(*a.inputs[0], *a.inputs[1], a.grad_output);
                return std::vector<Tensor>{std::move(g.first), std::move(g.second)};
              },
          .saved_inputs = {0, 1},
          .forward_cost = [](const CostArgs& c) -> std::uint64_t { return c.output.numel() * c.inputs[0]->dim(2); },
          .backward_cost =
              [](const CostArgs& c) -> std::uint64_t { return 2 * c.output.numel() * c.inputs[0]->dim(2); }});

  add_op({.name = "gather_rows",
          .forward =
              [](auto in, const OpAttrs& at) {
                if (!at.rows) return *in[0];
                return kernels::gather_rows(*in[0], *at.rows);
              },
          .backward =
              [](const BackwardArgs& a) {
                if (!a.attrs.rows) return std::vector<Tensor>{a.grad_output};
                return std::vector<Tensor>{
                    kernels::scatter_rows(a.grad_output, *a.attrs.rows, (*a.input_shapes[0])[0])};
              },
          .saved_inputs = {},
          .forward_cost = out_elems,
          .backward_cost = out_elems});

  add_op({.name = "sum",
          .forward = [](auto in, const OpAttrs&) { return Tensor::scalar(kernels::sum(*in[0])); },
          .backward =
              [](const BackwardArgs& a) {
                return std::vector<Tensor>{Tensor(*a.input_shapes[0], a.grad_output.item())};
              },
          .saved_inputs = {},
          .forward_cost = [](const CostArgs& c) -> std::uint64_t { return c.inputs[0]->numel(); },
          .backward_cost = [](const CostArgs& c) -> std::uint64_t { return c.inputs[0]->numel(); }});

  add_op({.name = "mean_rows",
          .forward =
              [](auto in, const OpAttrs&) {
                Tensor s = kernels::sum_rows(*in[0]);
                const double n = static_cast<double>(in[0]->rows());
                return kernels::scale(std::move(s).reshaped(Shape{1, in[0]->cols()}), 1.0 / n);
              },
          .backward =
              [](const BackwardArgs& a) {
                const Shape& shape = *a.input_shapes[0];
                Tensor g(shape);
                const std::size_t n = shape[0];
                const std::size_t c = g.cols();
                for (std::size_t r = 0; r < n; ++r)
                  for (std::size_t j = 0; j < c; ++j) g[r * c + j] = a.grad_output[j] / static_cast<double>(n);
                return std::vector<Tensor>{std::move(g)};
              },
          .saved_inputs = {},
          .forward_cost = [](const CostArgs& c) -> std::uint64_t { return c.inputs[0]->numel(); },
          .backward_cost = [](const CostArgs& c) -> std::uint64_t { return c.inputs[0]->numel(); }});

  add_op({.name = "cross_entropy",
          .forward =
              [](auto in, const OpAttrs& at) { return Tensor::scalar(kernels::cross_entropy(*in[0], at.labels)); },
          .backward =
              [](const BackwardArgs& a) {
                return std::vector<Tensor>{
                    kernels::cross_entropy_backward(*a.inputs[0], a.attrs.labels, a.grad_output.item())};
              },
          .saved_inputs = {0},
          .forward_cost = [](const CostArgs& c) -> std::uint64_t { return c.inputs[0]->numel(); },
          .backward_cost = [](const CostArgs& c) -> std::uint64_t { return c.inputs[0]->numel(); }});

  return reg;
}

}  // namespace detail

namespace detail {
inline const std::map<std::string, OpDef, std::less<>>& registry() {
  static const auto reg = build_registry();
  return reg;
}
}  // namespace detail

/// Looks up a primitive op by id; unknown ids are a configuration error.
inline const OpDef& op_def(std::string_view name) {
  auto it = detail::registry().find(name);
  if (it == detail::registry().end()) throw ConfigError("unknown op '" + std::string(name) + "'");
  return it->second;
}

/// Ids of every registered op, sorted.
inline std::vector<std::string> op_names() {
  std::vector<std::string> out;
  for (const auto& [name, def] : detail::registry()) out.push_back(name);
  return out;
}

}  // namespace stochbp
