// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

// Define-by-run reverse-mode tape.
//
// Ops execute eagerly and append a TapeNode; node ids are assigned in
// execution order, so the node list is already topologically sorted. Every
// node carries a CachePolicy and the tape keeps a running count of the
// activation elements each policy retains for backward (the accountant).
// The count is a model of memory, not of the process heap: values stay
// readable on the tape, but only what the accountant charged is ever handed
// to gradient code.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stochbp/autograd/op_registry.hpp"
#include "stochbp/errors.hpp"
#include "stochbp/sample_mask.hpp"
#include "stochbp/tensor.hpp"

namespace stochbp {

using NodeId = std::size_t;
class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

enum class CacheKind {
  full,               // keep what the op needs for backward
  none,               // keep nothing; the node is not differentiable
  recompute,          // keep region inputs, re-run the region during backward
  sampled,            // keep activations of the kept nodes only
  sampled_recompute,  // keep the kept nodes' inputs, re-run on them during backward
};

struct CachePolicy {
  CacheKind kind = CacheKind::full;
  std::shared_ptr<const SampleMask> mask;

  static CachePolicy full() { return {}; }
  static CachePolicy none() { return {CacheKind::none, nullptr}; }
  static CachePolicy recompute() { return {CacheKind::recompute, nullptr}; }
  static CachePolicy sampled(std::shared_ptr<const SampleMask> m) {
    if (!m) throw ConfigError("sampled cache policy without a mask");
    return {CacheKind::sampled, std::move(m)};
  }
  static CachePolicy sampled_recompute(std::shared_ptr<const SampleMask> m) {
    if (!m) throw ConfigError("sampled cache policy without a mask");
    return {CacheKind::sampled_recompute, std::move(m)};
  }

  bool uses_mask() const noexcept { return kind == CacheKind::sampled || kind == CacheKind::sampled_recompute; }
  bool wraps_region() const noexcept { return kind != CacheKind::full && kind != CacheKind::none; }

  std::string label() const {
    switch (kind) {
      case CacheKind::full: return "full";
      case CacheKind::none: return "none";
      case CacheKind::recompute: return "recompute";
      case CacheKind::sampled: return "sampled";
      case CacheKind::sampled_recompute: return "sampled_recompute";
    }
    return "?";
  }
};

/// Cached activation elements, in total and per layer tag.
struct MemoryStats {
  std::uint64_t cached_elements_total = 0;
  std::map<int, std::uint64_t> cached_elements_per_layer;

  void charge(int layer, std::uint64_t n) {
    cached_elements_total += n;
    cached_elements_per_layer[layer] += n;
  }

  std::uint64_t layer(int l) const {
    auto it = cached_elements_per_layer.find(l);
    return it == cached_elements_per_layer.end() ? 0 : it->second;
  }
};

/// Elementary-op counts (see op_registry.hpp for the convention). Recompute
/// passes count as forward work even though they run during backward.
struct OpCounter {
  std::uint64_t forward_elementary_ops = 0;
  std::uint64_t backward_elementary_ops = 0;
  std::map<int, std::uint64_t> forward_per_layer;
  std::map<int, std::uint64_t> backward_per_layer;

  void add_forward(int layer, std::uint64_t n) {
    forward_elementary_ops += n;
    forward_per_layer[layer] += n;
  }
  void add_backward(int layer, std::uint64_t n) {
    backward_elementary_ops += n;
    backward_per_layer[layer] += n;
  }
  void merge(const OpCounter& other) {
    for (const auto& [l, n] : other.forward_per_layer) add_forward(l, n);
    for (const auto& [l, n] : other.backward_per_layer) add_backward(l, n);
  }
  void reset() { *this = OpCounter{}; }

  std::uint64_t forward_of(int l) const {
    auto it = forward_per_layer.find(l);
    return it == forward_per_layer.end() ? 0 : it->second;
  }
  std::uint64_t backward_of(int l) const {
    auto it = backward_per_layer.find(l);
    return it == backward_per_layer.end() ? 0 : it->second;
  }
};

/// Gradients of the leaves (and explicitly retained nodes) of one backward pass.
class Gradients {
 public:
  bool contains(Var v) const { return grads_.count(v.id) != 0; }
  bool contains(NodeId id) const { return grads_.count(id) != 0; }

  const Tensor& at(Var v) const { return at(v.id); }
  const Tensor& at(NodeId id) const {
    auto it = grads_.find(id);
    if (it == grads_.end()) throw IndexError("no gradient recorded for node " + std::to_string(id));
    return it->second;
  }

  void set(NodeId id, Tensor g) { grads_[id] = std::move(g); }
  std::size_t size() const noexcept { return grads_.size(); }
  const std::map<NodeId, Tensor>& items() const noexcept { return grads_; }

 private:
  std::map<NodeId, Tensor> grads_;
};

/// Backward half of a node that wraps a sub-graph (checkpoint or SBP region).
class CompositeNode {
 public:
  struct Result {
    std::vector<Tensor> input_grads;  // empty Tensor: no contribution
    std::uint64_t forward_ops = 0;    // recompute work done during backward
    std::uint64_t backward_ops = 0;
  };

  virtual ~CompositeNode() = default;
  virtual Result backward(const Tensor& dy) = 0;
};

struct TapeNode {
  std::string op;
  std::vector<NodeId> inputs;
  std::shared_ptr<const Tensor> value;
  OpAttrs attrs;
  CachePolicy policy;
  std::vector<NodeId> saved;
  bool saves_output = false;
  std::uint64_t charge = 0;
  int layer = -1;
  int output_of_layer = -1;
  bool requires_grad = false;
  bool is_leaf = false;
  bool is_parameter = false;
  bool retain_grad = false;
  std::optional<NodeId> alias_of;
  const OpDef* def = nullptr;
  std::shared_ptr<CompositeNode> composite;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ------------------------------------------------------------ leaves

  Var leaf(Tensor value, bool requires_grad = false) {
    return leaf(std::make_shared<const Tensor>(std::move(value)), requires_grad);
  }

  Var leaf(std::shared_ptr<const Tensor> value, bool requires_grad) {
    TapeNode n;
    n.op = "leaf";
    n.value = std::move(value);
    n.is_leaf = true;
    n.requires_grad = requires_grad;
    n.layer = layer_;
    return push(std::move(n));
  }

  /// Trainable weight: requires grad, never charged to the accountant.
  Var parameter(std::shared_ptr<const Tensor> value) {
    TapeNode n;
    n.op = "parameter";
    n.value = std::move(value);
    n.is_leaf = true;
    n.is_parameter = true;
    n.requires_grad = true;
    n.layer = layer_;
    return push(std::move(n));
  }
  Var parameter(Tensor value) { return parameter(std::make_shared<const Tensor>(std::move(value))); }

  /// Leaf that stands for node `parent_id` of an enclosing tape; charges
  /// against it are forwarded there so a tensor is never counted twice.
  Var alias_leaf(NodeId parent_id, std::shared_ptr<const Tensor> value, bool requires_grad, bool is_parameter) {
    TapeNode n;
    n.op = is_parameter ? "parameter" : "leaf";
    n.value = std::move(value);
    n.is_leaf = true;
    n.is_parameter = is_parameter;
    n.requires_grad = requires_grad;
    n.alias_of = parent_id;
    n.layer = layer_;
    return push(std::move(n));
  }

  // ------------------------------------------------------------ recording

  /// Runs primitive op `op` eagerly and appends it. Region policies
  /// (recompute, sampled, sampled_recompute) wrap the single op in a region;
  /// see region.hpp.
  Var record(std::string_view op, std::vector<Var> inputs, CachePolicy policy = CachePolicy::full(),
             OpAttrs attrs = {});

  Var record(std::string_view op, std::vector<Var> inputs, OpAttrs attrs) {
    return record(op, std::move(inputs), CachePolicy::full(), std::move(attrs));
  }

  /// Appends a node whose backward is delegated to `composite`. The caller has
  /// already charged the accountant; `charge` is stored for inspection.
  Var record_composite(std::string label, std::vector<NodeId> inputs, std::shared_ptr<const Tensor> value,
                       CachePolicy policy, std::uint64_t charge, std::shared_ptr<CompositeNode> composite,
                       bool requires_grad) {
    TapeNode n;
    n.op = std::move(label);
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.policy = std::move(policy);
    n.charge = charge;
    n.composite = std::move(composite);
    n.requires_grad = requires_grad && grad_enabled_;
    n.layer = layer_;
    return push(std::move(n));
  }

  /// Charges node `id` once; parameters are free. Returns elements added.
  std::uint64_t charge_node(NodeId id) {
    TapeNode& n = nodes_.at(id);
    if (n.is_parameter || charged_[id]) return 0;
    charged_[id] = true;
    const std::uint64_t elems = n.value->numel();
    memory_.charge(layer_, elems);
    return elems;
  }

  /// Charges storage that is not a node of this tape (e.g. a gathered copy).
  std::uint64_t charge_elements(std::uint64_t n) {
    memory_.charge(layer_, n);
    return n;
  }

  // ------------------------------------------------------------ backward

  /// Gradients of scalar `loss` w.r.t. every leaf that requires grad.
  Gradients backward(Var loss) {
    check_owned(loss);
    if (value(loss.id).numel() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(value(loss.id).shape()));
    }
    return run_backward(loss.id, Tensor(value(loss.id).shape(), 1.0), nullptr, nullptr);
  }

  /// Dense reference for partial-gradient training: like backward(), but the
  /// gradient arriving at every output tagged with a layer in `masked_layers`
  /// is zeroed at node positions outside `mask` before it propagates down.
  Gradients masked_backward(Var loss, const SampleMask& mask, const std::set<int>& masked_layers) {
    check_owned(loss);
    if (value(loss.id).numel() != 1) {
      throw ContractError("masked_backward: loss must be scalar, got shape " + shape_str(value(loss.id).shape()));
    }
    return run_backward(loss.id, Tensor(value(loss.id).shape(), 1.0), &mask, &masked_layers);
  }

  /// Vector-Jacobian product: backpropagates `seed` from a non-scalar output.
  Gradients backward_from(Var output, const Tensor& seed) {
    check_owned(output);
    if (seed.shape() != value(output.id).shape()) {
      throw DimensionError("backward_from: seed " + shape_str(seed.shape()) + " vs output " +
                           shape_str(value(output.id).shape()));
    }
    return run_backward(output.id, seed, nullptr, nullptr);
  }

  void retain_grad(Var v) {
    check_owned(v);
    nodes_[v.id].retain_grad = true;
  }

  /// Marks `v` as the output of model layer `layer` (used by masked_backward).
  void tag_layer_output(Var v, int layer) {
    check_owned(v);
    nodes_[v.id].output_of_layer = layer;
  }

  // ------------------------------------------------------------ state

  const MemoryStats& memory_stats() const noexcept { return memory_; }
  const OpCounter& op_counter() const noexcept { return ops_; }
  OpCounter& op_counter() noexcept { return ops_; }

  bool grad_enabled() const noexcept { return grad_enabled_; }
  void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }
  int current_layer() const noexcept { return layer_; }
  void set_current_layer(int layer) noexcept { layer_ = layer; }

  std::size_t size() const noexcept { return nodes_.size(); }
  const TapeNode& node(NodeId id) const { return nodes_.at(id); }
  const Tensor& value(NodeId id) const { return *nodes_.at(id).value; }
  std::shared_ptr<const Tensor> value_ptr(NodeId id) const { return nodes_.at(id).value; }

  std::vector<NodeId> charged_nodes() const {
    std::vector<NodeId> out;
    for (NodeId i = 0; i < charged_.size(); ++i)
      if (charged_[i]) out.push_back(i);
    return out;
  }

 private:
  Var push(TapeNode n) {
    nodes_.push_back(std::move(n));
    charged_.push_back(false);
    return Var{this, nodes_.size() - 1};
  }

  void check_owned(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw ContractError("variable does not belong to this tape");
  }

  Var record_primitive(const OpDef& def, std::vector<Var> inputs, CachePolicy policy, OpAttrs attrs) {
    std::vector<const Tensor*> in;
    in.reserve(inputs.size());
    std::array<bool, 4> needs{};
    bool any_grad = false;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      in.push_back(&value(inputs[i].id));
      needs[i] = nodes_[inputs[i].id].requires_grad;
      any_grad = any_grad || needs[i];
    }
    Tensor out = def.forward(in, attrs);
    ops_.add_forward(layer_, def.forward_cost(CostArgs{in, out, attrs, std::span<const bool>(needs.data(), in.size())}));

    TapeNode n;
    n.op = def.name;
    n.def = &def;
    n.attrs = std::move(attrs);
    n.policy = policy;
    n.layer = layer_;
    n.value = std::make_shared<const Tensor>(std::move(out));
    n.requires_grad = grad_enabled_ && policy.kind == CacheKind::full && any_grad;
    for (const Var& v : inputs) n.inputs.push_back(v.id);
    const bool keep = n.requires_grad;
    if (keep) {
      for (std::size_t idx : def.saved_inputs) n.saved.push_back(n.inputs.at(idx));
      n.saves_output = def.saves_output;
    }
    Var result = push(std::move(n));
    if (keep) {
      std::uint64_t charge = 0;
      for (NodeId s : nodes_[result.id].saved) charge += charge_node(s);
      if (def.saves_output) charge += charge_node(result.id);
      nodes_[result.id].charge = charge;
    }
    return result;
  }

  Gradients run_backward(NodeId root, Tensor seed, const SampleMask* mask, const std::set<int>* masked_layers) {
    std::vector<Tensor> grads(root + 1);
    std::vector<bool> has(root + 1, false);
    grads[root] = std::move(seed);
    has[root] = true;
    Gradients result;

    for (NodeId id = root + 1; id-- > 0;) {
      if (!has[id]) continue;
      TapeNode& node = nodes_[id];
      if (mask && node.output_of_layer >= 0 && masked_layers->count(node.output_of_layer)) {
        apply_mask(grads[id], *mask, node);
      }
      if (node.is_leaf || node.retain_grad) {
        if (node.requires_grad || node.retain_grad) result.set(id, grads[id]);
      }
      if (node.is_leaf || !node.requires_grad) continue;

      std::vector<Tensor> input_grads;
      if (node.composite) {
        auto r = node.composite->backward(grads[id]);
        ops_.add_forward(node.layer, r.forward_ops);
        ops_.add_backward(node.layer, r.backward_ops);
        input_grads = std::move(r.input_grads);
      } else {
        input_grads = primitive_backward(node, grads[id]);
      }
      for (std::size_t i = 0; i < node.inputs.size() && i < input_grads.size(); ++i) {
        const NodeId src = node.inputs[i];
        if (input_grads[i].empty() || !nodes_[src].requires_grad) continue;
        if (input_grads[i].shape() != value(src).shape()) {
          throw DimensionError("backward: gradient " + shape_str(input_grads[i].shape()) + " for value " +
                               shape_str(value(src).shape()) + " in op " + node.op);
        }
        if (!has[src]) {
          grads[src] = std::move(input_grads[i]);
          has[src] = true;
        } else {
          auto dst = grads[src].data();
          auto add = input_grads[i].data();
          for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += add[k];
        }
      }
      grads[id] = Tensor();
    }

    // Leaves that need a gradient but are not reachable from the root get zeros.
    for (NodeId id = 0; id <= root && id < nodes_.size(); ++id) {
      const TapeNode& n = nodes_[id];
      if (n.is_leaf && n.requires_grad && !result.contains(id)) result.set(id, Tensor(n.value->shape()));
    }
    return result;
  }

  std::vector<Tensor> primitive_backward(const TapeNode& node, const Tensor& dy) {
    const OpDef& def = *node.def;
    const std::size_t arity = node.inputs.size();
    std::vector<const Tensor*> saved_in(arity, nullptr);
    std::vector<const Tensor*> all_in(arity, nullptr);
    std::vector<const Shape*> shapes(arity, nullptr);
    std::array<bool, 4> needs{};
    for (std::size_t i = 0; i < arity; ++i) {
      all_in[i] = &value(node.inputs[i]);
      shapes[i] = &all_in[i]->shape();
      needs[i] = nodes_[node.inputs[i]].requires_grad;
    }
    for (std::size_t idx : def.saved_inputs) saved_in[idx] = all_in[idx];
    const std::span<const bool> need_span(needs.data(), arity);
    auto grads = def.backward(BackwardArgs{saved_in, node.saves_output ? node.value.get() : nullptr, shapes, dy,
                                           node.attrs, need_span});
    ops_.add_backward(node.layer, def.backward_cost(CostArgs{all_in, *node.value, node.attrs, need_span}));
    return grads;
  }

  static void apply_mask(Tensor& g, const SampleMask& mask, const TapeNode& node) {
    if (mask.total_nodes() != g.rows()) {
      throw IndexError("masked_backward: mask over " + std::to_string(mask.total_nodes()) + " nodes applied to " +
                       node.op + " output with " + std::to_string(g.rows()) + " rows");
    }
    const std::size_t c = g.cols();
    auto d = g.data();
    std::size_t next = 0;
    const auto& kept = mask.kept();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      if (next < kept.size() && kept[next] == r) {
        ++next;
        continue;
      }
      std::fill_n(d.begin() + static_cast<std::ptrdiff_t>(r * c), c, 0.0);
    }
  }

  std::vector<TapeNode> nodes_;
  std::vector<bool> charged_;
  MemoryStats memory_;
  OpCounter ops_;
  bool grad_enabled_ = true;
  int layer_ = -1;
};

inline const Tensor& Var::value() const {
  if (!tape) throw StateError("unbound variable");
  return tape->value(id);
}

inline bool Var::requires_grad() const { return tape && tape->node(id).requires_grad; }

/// Disables gradient recording on a tape for the guard's lifetime.
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& tape) : tape_(tape), prev_(tape.grad_enabled()) { tape_.set_grad_enabled(false); }
  ~NoGradGuard() { tape_.set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape& tape_;
  bool prev_;
};

/// Tags nodes recorded during the guard's lifetime with a layer id.
class LayerScope {
 public:
  LayerScope(Tape& tape, int layer) : tape_(tape), prev_(tape.current_layer()) { tape_.set_current_layer(layer); }
  ~LayerScope() { tape_.set_current_layer(prev_); }
  LayerScope(const LayerScope&) = delete;
  LayerScope& operator=(const LayerScope&) = delete;

 private:
  Tape& tape_;
  int prev_;
};

}  // namespace stochbp

#include "stochbp/autograd/region.hpp"
