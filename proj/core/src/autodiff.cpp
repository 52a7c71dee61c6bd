#include "pidm/autodiff.hpp"

#include <stdexcept>

namespace pidm {

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("Var: use of an unbound handle");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value) { return push("leaf", std::move(value), true, nullptr); }

Var Tape::constant(Tensor value) { return push("constant", std::move(value), false, nullptr); }

Var Tape::record(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
                 Backward backward) {
  bool tracked = false;
  for (const auto& v : inputs) {
    check_same_tape(v);
    tracked = tracked || nodes_[v.id()].requires_grad;
  }
  return push(op, std::move(value), tracked, tracked ? std::move(backward) : nullptr);
}

Var Tape::record(std::string_view op, Tensor value, const std::vector<Var>& inputs,
                 Backward backward) {
  bool tracked = false;
  for (const auto& v : inputs) {
    check_same_tape(v);
    tracked = tracked || nodes_[v.id()].requires_grad;
  }
  return push(op, std::move(value), tracked, tracked ? std::move(backward) : nullptr);
}

Var Tape::push(std::string_view op, Tensor value, bool tracked, Backward backward) {
  const std::size_t id = nodes_.size();
  if (check_finite_ && !value.all_finite()) throw NumericError(op, id, "forward");
  Node node;
  node.op = op;
  node.value = std::move(value);
  node.requires_grad = tracked;
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, id);
}

void Tape::check_same_tape(const Var& v) const {
  if (v.tape() != this) throw std::invalid_argument("Tape: operand recorded on a different tape");
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(const Var& root) {
  check_same_tape(root);
  if (root.value().size() != 1) {
    throw ShapeError("backward", "root must be a scalar, got shape " + shape_str(root.shape()));
  }
  if (!nodes_[root.id()].requires_grad) {
    throw std::invalid_argument("backward: root does not depend on any tracked leaf");
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  grad_buffer(root.id()).fill(1.0);

  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad) continue;
    if (!n.grad.all_finite()) throw NumericError(n.op, i, "backward");
    if (n.backward) n.backward(*this, i);
  }
}

Tensor Tape::grad(const Var& v) const {
  check_same_tape(v);
  const Node& n = nodes_[v.id()];
  if (!n.has_grad) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

}  // namespace pidm
