#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "feederclip/parameters.hpp"
#include "feederclip/tensor.hpp"

namespace feederclip {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode recording. Each op pushes its output together with a closure
/// that scatters the output gradient into its parents.
class Tape {
 public:
  using Backward =
      std::function<void(Tape&, const Tensor& out_grad, const Tensor& out_value)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  /// Leaf bound to `store[name]`; its gradient is reported by gradients(store).
  Var parameter(const ParameterStore& store, const std::string& name);

  Var record(Tensor value, std::vector<Var> parents, Backward backward);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  /// Gradient buffer of `v`, zero-initialized on first access.
  Tensor& grad(Var v);
  const Tensor& grad(Var v) const { return nodes_[v.id()].grad; }

  void backward(Var loss);

  Gradients gradients(const ParameterStore& store) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };
  struct Binding {
    const ParameterStore* store;
    std::string name;
    std::size_t id;
  };

  std::deque<Node> nodes_;
  std::vector<Binding> bindings_;
};

}  // namespace feederclip
