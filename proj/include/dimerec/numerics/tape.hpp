#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dimerec/numerics/tensor.hpp"

namespace dimerec {

// A trainable leaf. The tape accumulates into `grad`; callers zero it
// between optimizer steps.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Receives the upstream gradient of a node and adds its contribution into
// the gradients of the node's inputs. `input_grad(i)` returns nullptr when
// input i does not need a gradient.
class GradContext {
 public:
  GradContext(Tape& tape, const std::vector<std::size_t>& inputs) : tape_(tape), inputs_(inputs) {}
  Tensor* input_grad(std::size_t i);
  const Tensor& input_value(std::size_t i) const;

 private:
  Tape& tape_;
  const std::vector<std::size_t>& inputs_;
};

using BackwardFn = std::function<void(const Tensor& out_grad, GradContext& ctx)>;

// Ordered record of differentiable operations. Nodes are appended in
// execution order and `backward` walks them in exact reverse; a tape can be
// consumed by one backward pass only.
class Tape {
 public:
  // With gradients disabled, parameters enter as constants and no backward
  // closures are kept (used for inference and evaluation).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, nullptr, false});
    return Var(this, nodes_.size() - 1);
  }

  Var param(Parameter& p) {
    const bool track = grad_enabled_;
    nodes_.push_back(Node{p.value, {}, {}, nullptr, track ? &p : nullptr, track});
    return Var(this, nodes_.size() - 1);
  }

  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool needs = false;
    if (grad_enabled_) {
      for (std::size_t in : inputs) needs = needs || nodes_.at(in).needs_grad;
    }
    if (!needs) {
      inputs.clear();
      backward = nullptr;
    }
    nodes_.push_back(Node{std::move(value), {}, std::move(inputs), std::move(backward), nullptr, needs});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  bool grad_enabled() const { return grad_enabled_; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of a node, allocated on first use.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  // Seeds d(loss)/d(loss) = 1 and propagates to every parameter leaf.
  void backward(Var loss) {
    if (&loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
    if (consumed_) throw ContractError("backward: tape already consumed");
    const Tensor& lv = value(loss.id());
    if (lv.size() != 1) throw ContractError("backward: loss must be scalar, got shape " + shape_string(lv.shape()));
    if (!lv.all_finite()) throw NumericError("backward: non-finite loss");
    consumed_ = true;
    if (!needs_grad(loss.id())) return;
    grad(loss.id())[0] = 1.0;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.leaf != nullptr) {
        Tensor& pg = n.leaf->grad;
        if (pg.shape() != n.value.shape()) pg = Tensor(n.value.shape());
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
      } else if (n.backward) {
        GradContext ctx(*this, n.inputs);
        n.backward(n.grad, ctx);
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* leaf;
    bool needs_grad;
  };

  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->needs_grad(id_); }

inline Tensor* GradContext::input_grad(std::size_t i) {
  const std::size_t id = inputs_.at(i);
  return tape_.needs_grad(id) ? &tape_.grad(id) : nullptr;
}

inline const Tensor& GradContext::input_value(std::size_t i) const { return tape_.value(inputs_.at(i)); }

inline void backward(Var loss) { loss.tape().backward(loss); }

}  // namespace dimerec
