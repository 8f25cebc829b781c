// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

// Thin Var-level wrappers over Tape::record with fully-cached policy.

#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "stochbp/autograd/tape.hpp"

namespace stochbp::ops {

inline Var add(Var a, Var b) { return a.tape->record("add", {a, b}); }
inline Var mul(Var a, Var b) { return a.tape->record("mul", {a, b}); }
inline Var square(Var a) { return a.tape->record("square", {a}); }
inline Var relu(Var a) { return a.tape->record("relu", {a}); }
inline Var gelu(Var a) { return a.tape->record("gelu", {a}); }
inline Var softmax_rows(Var a) { return a.tape->record("softmax_rows", {a}); }
inline Var sum(Var a) { return a.tape->record("sum", {a}); }
inline Var mean_rows(Var a) { return a.tape->record("mean_rows", {a}); }
inline Var matmul(Var a, Var b) { return a.tape->record("matmul", {a, b}); }

inline Var scale(Var a, double alpha) {
  OpAttrs at;
  at.alpha = alpha;
  return a.tape->record("scale", {a}, at);
}

/// x W (+ b); with `rows`, only those rows of x are projected.
inline Var linear(Var x, Var w, std::optional<Var> b = std::nullopt,
                  std::optional<std::vector<std::size_t>> rows = std::nullopt) {
  OpAttrs at;
  at.rows = std::move(rows);
  std::vector<Var> in{x, w};
  if (b) in.push_back(*b);
  return x.tape->record("linear", std::move(in), at);
}

inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  OpAttrs at;
  at.eps = eps;
  return x.tape->record("layer_norm", {x, gamma, beta}, at);
}

/// Scaled multi-head scores [heads x nq x nk]. `positions` are the key-axis
/// positions of the query rows (used by the causal mask).
inline Var attention_scores(Var q, Var k, std::size_t heads, double scale, bool causal,
                            std::optional<std::vector<std::size_t>> positions = std::nullopt) {
  OpAttrs at;
  at.heads = heads;
  at.alpha = scale;
  at.causal = causal;
  at.rows = std::move(positions);
  return q.tape->record("attention_scores", {q, k}, at);
}

inline Var attention_context(Var p, Var v) { return p.tape->record("attention_context", {p, v}); }

inline Var gather_rows(Var x, std::vector<std::size_t> rows) {
  OpAttrs at;
  at.rows = std::move(rows);
  return x.tape->record("gather_rows", {x}, at);
}

inline Var cross_entropy(Var logits, std::vector<std::size_t> labels) {
  OpAttrs at;
  at.labels = std::move(labels);
  return logits.tape->record("cross_entropy", {logits}, at);
}

}  // namespace stochbp::ops
