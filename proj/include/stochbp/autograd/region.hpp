// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

// Regions: a sub-graph recorded on the parent tape as one composite node
// whose cache policy decides what survives until backward.
//
//   recompute          inputs kept, body re-run under recording in backward
//   sampled            body re-run on the kept rows during forward; that
//                      sub-tape (and its caches) is held until backward
//   sampled_recompute  kept rows of node-axis inputs plus full side inputs
//                      kept; body re-run on them in backward
//
// In every mode the output value comes from a separate no-grad pass over all
// rows, so the forward result is identical to the unwrapped body.

#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stochbp/autograd/tape.hpp"
#include "stochbp/kernels.hpp"

namespace stochbp {

/// How a region input relates to the node axis.
enum class InputRole {
  node_axis,  // one row per node; only kept rows are retained
  side,       // needed in full (keys/values, residual sources)
  param,      // trainable weight; never charged
};

struct RegionInput {
  Var var;
  InputRole role = InputRole::node_axis;
};

/// Rows of the node axis the body must produce. `kept` unset means all.
struct RowSelection {
  std::size_t total = 0;
  std::optional<std::vector<std::size_t>> kept;

  bool all() const noexcept { return !kept.has_value(); }
  std::size_t count() const noexcept { return kept ? kept->size() : total; }

  std::vector<std::size_t> positions() const {
    if (kept) return *kept;
    return detail::all_rows(total);
  }
};

/// Body of a region. Inputs arrive in declaration order; node-axis inputs are
/// already restricted to `sel`, side and param inputs are whole. The result
/// must have one row per selected node.
using RegionBody = std::function<Var(Tape&, std::span<const Var>, const RowSelection&)>;

class RegionFunction : public CompositeNode, public std::enable_shared_from_this<RegionFunction> {
 public:
  static std::shared_ptr<RegionFunction> create(std::string label, RegionBody body, CachePolicy policy) {
    return std::shared_ptr<RegionFunction>(new RegionFunction(std::move(label), std::move(body), std::move(policy)));
  }

  const CachePolicy& policy() const noexcept { return policy_; }
  const std::string& label() const noexcept { return label_; }
  bool forwarded() const noexcept { return forwarded_; }

  /// Elements this region charged to the parent accountant.
  std::uint64_t charge() const noexcept { return charge_; }

  Var forward(Tape& parent, std::vector<RegionInput> inputs) {
    if (forwarded_) throw StateError("region '" + label_ + "': forward called twice");
    if (!policy_.wraps_region()) throw ConfigError("region '" + label_ + "': policy " + policy_.label());
    bind(parent, inputs);
    forwarded_ = true;
    const int layer = parent.current_layer();

    // Exact output over all rows, nothing retained.
    Tape scratch;
    scratch.set_grad_enabled(false);
    scratch.set_current_layer(layer);
    std::vector<Var> plain;
    for (const RegionInput& in : inputs) plain.push_back(scratch.leaf(parent.value_ptr(in.var.id), false));
    const Var y = body_(scratch, plain, RowSelection{total_, std::nullopt});
    check_rows(y.value(), total_);
    parent.op_counter().add_forward(layer, scratch.op_counter().forward_elementary_ops);
    auto y_value = scratch.value_ptr(y.id);

    std::vector<NodeId> ids;
    bool any_grad = false;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      ids.push_back(inputs[i].var.id);
      needs_[i] = parent.node(inputs[i].var.id).requires_grad;
      any_grad = any_grad || needs_[i];
    }
    if (!parent.grad_enabled() || !any_grad) {
      released_ = true;
      return parent.record_composite(label_, std::move(ids), std::move(y_value), policy_, 0, nullptr, false);
    }

    switch (policy_.kind) {
      case CacheKind::recompute: retain_inputs(parent, inputs, false); break;
      case CacheKind::sampled_recompute: retain_inputs(parent, inputs, true); break;
      case CacheKind::sampled: build_live(parent, inputs); break;
      default: break;
    }
    return parent.record_composite(label_, std::move(ids), std::move(y_value), policy_, charge_, shared_from_this(),
                                   true);
  }

  Result backward(const Tensor& dy) override {
    if (!forwarded_) throw StateError("region '" + label_ + "': backward called before forward");
    if (released_) throw StateError("region '" + label_ + "': backward called twice");
    released_ = true;

    const RowSelection sel = selection();
    const Tensor dy_sel = sel.all() ? dy : kernels::gather_rows(dy, *sel.kept);
    Result res;
    Gradients g;
    std::vector<Var> leaves;

    if (policy_.kind == CacheKind::sampled) {
      const auto before = live_->op_counter().backward_elementary_ops;
      g = live_->backward_from(live_output_, dy_sel);
      res.backward_ops = live_->op_counter().backward_elementary_ops - before;
      leaves = live_inputs_;
    } else {
      Tape sub;
      sub.set_current_layer(layer_);
      for (std::size_t i = 0; i < retained_.size(); ++i) {
        leaves.push_back(roles_[i] == InputRole::param ? sub.parameter(retained_[i])
                                                       : sub.leaf(retained_[i], needs_[i]));
      }
      const Var y = body_(sub, leaves, sel);
      check_rows(y.value(), sel.count());
      res.forward_ops = sub.op_counter().forward_elementary_ops;
      g = sub.backward_from(y, dy_sel);
      res.backward_ops = sub.op_counter().backward_elementary_ops;
    }

    res.input_grads.resize(roles_.size());
    for (std::size_t i = 0; i < roles_.size(); ++i) {
      if (!needs_[i] || !g.contains(leaves[i])) continue;
      const Tensor& gi = g.at(leaves[i]);
      res.input_grads[i] =
          (roles_[i] == InputRole::node_axis && !sel.all()) ? kernels::scatter_rows(gi, *sel.kept, total_) : gi;
    }
    live_.reset();
    retained_.clear();
    return res;
  }

 private:
  RegionFunction(std::string label, RegionBody body, CachePolicy policy)
      : label_(std::move(label)), body_(std::move(body)), policy_(std::move(policy)) {}

  RowSelection selection() const {
    if (!policy_.uses_mask()) return RowSelection{total_, std::nullopt};
    return RowSelection{total_, policy_.mask->kept()};
  }

  void bind(const Tape& parent, const std::vector<RegionInput>& inputs) {
    if (inputs.empty()) throw ContractError("region '" + label_ + "': no inputs");
    std::optional<std::size_t> total;
    for (const RegionInput& in : inputs) {
      if (in.var.tape != &parent) throw ContractError("region '" + label_ + "': input from another tape");
      roles_.push_back(in.role);
      if (in.role == InputRole::param) continue;
      const std::size_t rows = parent.value(in.var.id).rows();
      if (in.role == InputRole::node_axis) {
        if (total && *total != rows) {
          throw IndexError("region '" + label_ + "': node-axis inputs disagree on row count (" +
                           std::to_string(*total) + " vs " + std::to_string(rows) + ")");
        }
        total = rows;
      }
    }
    if (!total) {
      for (const RegionInput& in : inputs)
        if (in.role == InputRole::side) total = parent.value(in.var.id).rows();
    }
    if (!total) throw ContractError("region '" + label_ + "': no node-axis input");
    total_ = *total;
    if (policy_.uses_mask() && policy_.mask->total_nodes() != total_) {
      throw IndexError("region '" + label_ + "': mask over " + std::to_string(policy_.mask->total_nodes()) +
                       " nodes, node axis has " + std::to_string(total_));
    }
    needs_.assign(inputs.size(), false);
    layer_ = parent.current_layer();
  }

  void check_rows(const Tensor& y, std::size_t expected) const {
    if (y.rows() != expected) {
      throw DimensionError("region '" + label_ + "': body produced " + std::to_string(y.rows()) + " rows, expected " +
                           std::to_string(expected));
    }
  }

  void retain_inputs(Tape& parent, const std::vector<RegionInput>& inputs, bool sampled) {
    for (const RegionInput& in : inputs) {
      auto value = parent.value_ptr(in.var.id);
      if (in.role == InputRole::param) {
        retained_.push_back(std::move(value));
      } else if (sampled && in.role == InputRole::node_axis) {
        auto rows = std::make_shared<const Tensor>(kernels::gather_rows(*value, policy_.mask->kept()));
        charge_ += parent.charge_elements(rows->numel());
        retained_.push_back(std::move(rows));
      } else {
        charge_ += parent.charge_node(in.var.id);
        retained_.push_back(std::move(value));
      }
    }
  }

  void build_live(Tape& parent, const std::vector<RegionInput>& inputs) {
    live_ = std::make_unique<Tape>();
    live_->set_current_layer(layer_);
    const RowSelection sel = selection();
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const NodeId id = inputs[i].var.id;
      switch (inputs[i].role) {
        case InputRole::param:
          live_inputs_.push_back(live_->alias_leaf(id, parent.value_ptr(id), true, true));
          break;
        case InputRole::side:
          live_inputs_.push_back(live_->alias_leaf(id, parent.value_ptr(id), needs_[i], false));
          break;
        case InputRole::node_axis:
          if (sel.all()) {
            live_inputs_.push_back(live_->alias_leaf(id, parent.value_ptr(id), needs_[i], false));
          } else {
            live_inputs_.push_back(live_->leaf(kernels::gather_rows(parent.value(id), *sel.kept), needs_[i]));
          }
          break;
      }
    }
    live_output_ = body_(*live_, live_inputs_, sel);
    check_rows(live_output_.value(), sel.count());
    parent.op_counter().add_forward(layer_, live_->op_counter().forward_elementary_ops);
    live_->op_counter().reset();
    for (NodeId id : live_->charged_nodes()) {
      const TapeNode& n = live_->node(id);
      charge_ += n.alias_of ? parent.charge_node(*n.alias_of) : parent.charge_elements(n.value->numel());
    }
  }

  std::string label_;
  RegionBody body_;
  CachePolicy policy_;
  std::vector<InputRole> roles_;
  std::vector<bool> needs_;
  std::vector<std::shared_ptr<const Tensor>> retained_;
  std::unique_ptr<Tape> live_;
  std::vector<Var> live_inputs_;
  Var live_output_;
  std::size_t total_ = 0;
  std::uint64_t charge_ = 0;
  int layer_ = -1;
  bool forwarded_ = false;
  bool released_ = false;
};

/// Runs `body` under `policy`. Full and none run inline on the parent tape.
inline Var run_region(Tape& tape, const CachePolicy& policy, std::string label, const RegionBody& body,
                      std::vector<RegionInput> inputs) {
  if (!policy.wraps_region()) {
    std::vector<Var> vars;
    std::optional<std::size_t> total;
    for (const RegionInput& in : inputs) {
      vars.push_back(in.var);
      if (!total && in.role != InputRole::param) total = in.var.value().rows();
    }
    std::optional<NoGradGuard> guard;
    if (policy.kind == CacheKind::none) guard.emplace(tape);
    return body(tape, vars, RowSelection{total.value_or(0), std::nullopt});
  }
  return RegionFunction::create(std::move(label), body, policy)->forward(tape, std::move(inputs));
}

/// Caches only the region's inputs and re-runs the body during backward.
inline Var checkpoint_region(Tape& tape, std::string label, const RegionBody& body,
                             std::vector<RegionInput> inputs) {
  return run_region(tape, CachePolicy::recompute(), std::move(label), body, std::move(inputs));
}

inline Var Tape::record(std::string_view op, std::vector<Var> inputs, CachePolicy policy, OpAttrs attrs) {
  const OpDef& def = op_def(op);
  if (inputs.size() < def.min_arity || inputs.size() > def.max_arity) {
    throw ContractError("op " + def.name + ": got " + std::to_string(inputs.size()) + " inputs");
  }
  for (const Var& v : inputs) check_owned(v);
  if (!policy.wraps_region()) return record_primitive(def, std::move(inputs), std::move(policy), std::move(attrs));

  // A single op under a region policy: parameters stay params, inputs whose
  // row count matches the mask are node-axis, everything else is a side input.
  std::vector<RegionInput> region_inputs;
  for (const Var& v : inputs) {
    InputRole role = InputRole::side;
    if (node(v.id).is_parameter) {
      role = InputRole::param;
    } else if (!policy.mask || value(v.id).rows() == policy.mask->total_nodes()) {
      role = InputRole::node_axis;
    }
    region_inputs.push_back({v, role});
  }
  RegionBody body = [name = def.name, attrs](Tape& t, std::span<const Var> in, const RowSelection&) {
    return t.record(name, std::vector<Var>(in.begin(), in.end()), attrs);
  };
  return RegionFunction::create(def.name, std::move(body), std::move(policy))->forward(*this, std::move(region_inputs));
}

}  // namespace stochbp
