#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string_view>
#include <vector>

#include "pidm/tensor.hpp"

namespace pidm {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid until the tape is cleared.
class Var {
 public:
  Var() = default;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode gradient tape.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// A node only stores a backward rule when at least one input requires a
/// gradient; constants and their descendants cost one saved value each.
///
/// A Tape is not thread-safe. Use one tape per thread.
class Tape {
 public:
  /// Propagates the gradient stored on `node` into the node's inputs.
  using Backward = std::function<void(Tape& tape, std::size_t node)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);

  /// Appends an op result. `backward` is dropped when no input is tracked.
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
             Backward backward);
  Var record(std::string_view op, Tensor value, const std::vector<Var>& inputs,
             Backward backward);

  /// Seeds d(root)/d(root) = 1 and visits every tracked node once in reverse order.
  /// Throws NumericError naming the first node whose gradient is non-finite.
  void backward(const Var& root);

  /// Gradient accumulated on `v`; a zero tensor when nothing flowed into it.
  Tensor grad(const Var& v) const;

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::string_view op_name(std::size_t id) const { return nodes_[id].op; }

  /// Mutable gradient buffer for `id`, zero-allocated on first use.
  Tensor& grad_buffer(std::size_t id);

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() noexcept { nodes_.clear(); }

  /// When enabled (the default) every recorded value is checked for NaN/Inf.
  void set_check_finite(bool on) noexcept { check_finite_ = on; }
  bool check_finite() const noexcept { return check_finite_; }

 private:
  struct Node {
    std::string_view op;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  Var push(std::string_view op, Tensor value, bool tracked, Backward backward);
  void check_same_tape(const Var& v) const;

  std::deque<Node> nodes_;  // references stay valid on append
  bool check_finite_ = true;
};

}  // namespace pidm
