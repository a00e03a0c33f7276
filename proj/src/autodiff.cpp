#include "attnreg/autodiff.hpp"

#include <algorithm>
#include <stdexcept>

#include "attnreg/ops.hpp"

namespace attnreg {

struct TensorAccess {
  static void link(Tensor& t, std::shared_ptr<detail::TapeState> state, std::size_t node) {
    t.tape_ = std::move(state);
    t.node_ = node;
  }
};

Tape::Tape() : state_(std::make_shared<detail::TapeState>()) {}

Tensor Tape::watch(const Tensor& value) {
  Tensor leaf = value.detached();
  const auto id = state_->new_node();
  state_->leaves.push_back(id);
  TensorAccess::link(leaf, state_, id);
  return leaf;
}

std::vector<Tensor> Tape::backward(const Tensor& objective, std::span<const Tensor> leaves) const {
  if (objective.numel() != 1)
    throw DimensionError("backward: objective must be scalar, got " +
                         shape_str(objective.shape()));
  if (objective.tape_state() != state_)
    throw std::invalid_argument("backward: objective was not recorded on this tape");
  for (const auto& leaf : leaves) {
    const bool registered =
        leaf.tape_state() == state_ &&
        std::find(state_->leaves.begin(), state_->leaves.end(), leaf.node_id()) !=
            state_->leaves.end();
    if (!registered) throw std::invalid_argument("backward: leaf is not registered on this tape");
  }

  std::vector<Tensor> grads(state_->node_count());
  std::vector<bool> has(state_->node_count(), false);
  grads[objective.node_id()] = Tensor::full(objective.shape(), 1.0, objective.dtype());
  has[objective.node_id()] = true;

  for (auto it = state_->entries.rbegin(); it != state_->entries.rend(); ++it) {
    if (!has[it->output]) continue;
    std::vector<bool> needs(it->inputs.size());
    for (std::size_t i = 0; i < it->inputs.size(); ++i)
      needs[i] = it->inputs[i] != detail::TapeState::npos;
    auto input_grads = it->backward(grads[it->output], needs);
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      if (!needs[i]) continue;
      const auto id = it->inputs[i];
      auto& g = input_grads.at(i);
      if (g.empty()) continue;
      if (has[id]) {
        grads[id] = add(grads[id], g);
      } else {
        grads[id] = std::move(g);
        has[id] = true;
      }
    }
    // Intermediate gradients are not needed once propagated.
    grads[it->output] = Tensor();
    has[it->output] = false;
  }

  std::vector<Tensor> out;
  out.reserve(leaves.size());
  for (const auto& leaf : leaves) {
    if (has[leaf.node_id()])
      out.push_back(grads[leaf.node_id()].detached());
    else
      out.push_back(Tensor::zeros(leaf.shape(), leaf.dtype()));
  }
  return out;
}

Tensor record_op(Tensor output, const std::vector<const Tensor*>& inputs, BackwardFn backward) {
  std::shared_ptr<detail::TapeState> state;
  for (const auto* in : inputs) {
    if (!in->on_tape()) continue;
    if (state && state != in->tape_state())
      throw std::invalid_argument("op inputs are recorded on different tapes");
    state = in->tape_state();
  }
  if (!state) return output;

  detail::TapeEntry entry;
  entry.inputs.reserve(inputs.size());
  for (const auto* in : inputs)
    entry.inputs.push_back(in->on_tape() ? in->node_id() : detail::TapeState::npos);
  entry.output = state->new_node();
  entry.backward = std::move(backward);
  Tensor linked = output.detached();
  TensorAccess::link(linked, state, entry.output);
  state->entries.push_back(std::move(entry));
  return linked;
}

Tensor record_op(Tensor output, std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
  return record_op(std::move(output), std::vector<const Tensor*>(inputs), std::move(backward));
}

}  // namespace attnreg
