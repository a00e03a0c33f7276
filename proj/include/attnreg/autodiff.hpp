#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "attnreg/tensor.hpp"

namespace attnreg {

// Maps the gradient of an op's output to gradients of its inputs. Entries of
// `needs` are false for inputs that are not on the tape; the corresponding
// result may be left as an empty Tensor.
using BackwardFn =
    std::function<std::vector<Tensor>(const Tensor& grad_out, const std::vector<bool>& needs)>;

namespace detail {

struct TapeEntry {
  std::size_t output;
  std::vector<std::size_t> inputs;  // npos for inputs not on the tape
  BackwardFn backward;
};

class TapeState {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  std::size_t new_node() { return next_node_++; }
  std::size_t node_count() const { return next_node_; }

  std::vector<TapeEntry> entries;
  std::vector<std::size_t> leaves;

 private:
  std::size_t next_node_ = 0;
};

}  // namespace detail

/// Reverse-mode gradient tape.
///
/// Recording is opt-in: an op is recorded only when at least one of its inputs
/// was produced from a watched leaf. A tape belongs to a single thread.
class Tape {
 public:
  Tape();

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // Registers `value` as a leaf and returns a copy linked to this tape.
  Tensor watch(const Tensor& value);

  // Gradients of the scalar `objective` with respect to each of `leaves`, in
  // order. Leaves the objective does not depend on get zero gradients.
  std::vector<Tensor> backward(const Tensor& objective, std::span<const Tensor> leaves) const;

  std::size_t recorded_ops() const { return state_->entries.size(); }

 private:
  std::shared_ptr<detail::TapeState> state_;
};

// Attaches `output` to the tape shared by `inputs`, if any. Inputs on two
// different tapes are an error. `backward` must not capture tape-linked
// tensors (capture Tensor::detached() copies instead).
Tensor record_op(Tensor output, std::initializer_list<const Tensor*> inputs, BackwardFn backward);
Tensor record_op(Tensor output, const std::vector<const Tensor*>& inputs, BackwardFn backward);

}  // namespace attnreg
