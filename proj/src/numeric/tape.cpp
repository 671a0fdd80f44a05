#include "feederclip/tape.hpp"

#include <stdexcept>

namespace feederclip {

const Tensor& Var::value() const { return tape_->value(*this); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const ParameterStore& store, const std::string& name) {
  Var v = variable(store.at(name));
  bindings_.push_back(Binding{&store, name, v.id()});
  return v;
}

Var Tape::record(Tensor value, std::vector<Var> parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) {
    if (&p.tape() != this) throw std::invalid_argument("Tape::record: parent from another tape");
    needs = needs || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : Backward{}});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad(Var v) {
  Node& n = nodes_[v.id()];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var loss) {
  const Tensor& out = value(loss);
  if (out.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_string(out.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor();
  grad(loss)[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad, n.value);
  }
}

Gradients Tape::gradients(const ParameterStore& store) const {
  Gradients out;
  for (const Binding& b : bindings_) {
    if (b.store != &store) continue;
    const Node& n = nodes_[b.id];
    Tensor g = n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
    auto [it, inserted] = out.try_emplace(b.name, g);
    if (!inserted) {
      for (std::size_t k = 0; k < g.size(); ++k) it->second[k] += g[k];
    }
  }
  return out;
}

}  // namespace feederclip
