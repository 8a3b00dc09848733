#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "muse/tensor.hpp"

namespace muse {

enum class ParamGroup { standard, crf };

/// A trainable tensor with its accumulated gradient. Owned by a
/// ParameterStore; tapes refer to it by pointer while a step is in flight.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  ParamGroup group = ParamGroup::standard;

  void zero_grad() {
    if (grad.shape() != value.shape()) {
      grad = Tensor(value.shape());
    } else {
      grad.fill(0.0);
    }
  }
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid as long as the
/// tape is alive and has not been cleared.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of operations. Nodes are appended in evaluation order, so
/// every node's inputs precede it and reverse iteration is a valid
/// topological order for the backward sweep.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false, const char* op = "leaf") {
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false, "constant"); }

  /// Leaf whose gradient is added into `p.grad` at the end of backward_pass.
  /// The same parameter may be bound several times (shared weights).
  Var param(Parameter& p) {
    Var v = leaf(p.value, true, "param");
    nodes_.back().param = &p;
    return v;
  }

  /// Records an op output. The backward rule is kept only when some input
  /// participates in differentiation.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool needs = false;
    if (grad_enabled_) {
      for (const Var& in : inputs) {
        if (in.requires_grad()) {
          needs = true;
          break;
        }
      }
    }
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var record_many(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
    bool needs = false;
    if (grad_enabled_) {
      for (const Var& in : inputs) needs = needs || in.requires_grad();
    }
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const char* op(std::size_t id) const { return nodes_[id].op; }

  /// Gradient buffer of `id` for accumulation during backward, allocated
  /// zeroed on first touch; nullptr when the node takes no gradient.
  Tensor* grad_sink(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool grad_enabled() const noexcept { return grad_enabled_; }
  void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }
  void clear() { nodes_.clear(); }

  /// Name and index of the first recorded value holding NaN/Inf, or empty.
  std::string first_non_finite() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].value.all_finite()) {
        return std::string(nodes_[i].op) + " (node " + std::to_string(i) + ", shape " +
               shape_str(nodes_[i].value.shape()) + ")";
      }
    }
    return {};
  }

  friend void backward_pass(Tape& tape, Var root);

 private:
  struct Node {
    const char* op = "";
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

/// Reverse sweep from a scalar root. Every requires-grad node ends with a
/// gradient buffer (zero when the root does not depend on it) and
/// parameter-bound leaves add theirs into Parameter::grad.
inline void backward_pass(Tape& tape, Var root) {
  if (&root.tape() != &tape) throw ContractError("backward_pass: root belongs to another tape");
  if (root.value().size() != 1) {
    throw ContractError("backward_pass: root must be scalar, got " + shape_str(root.shape()));
  }
  for (auto& n : tape.nodes_) {
    if (n.requires_grad) n.grad = Tensor(n.value.shape());
  }
  if (!tape.nodes_[root.id()].requires_grad) return;
  tape.nodes_[root.id()].grad.fill(1.0);

  for (std::size_t i = root.id() + 1; i-- > 0;) {
    auto& n = tape.nodes_[i];
    if (n.requires_grad && n.backward) n.backward(tape, i);
  }
  for (auto& n : tape.nodes_) {
    if (n.param == nullptr || !n.requires_grad) continue;
    Parameter& p = *n.param;
    if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
    auto dst = p.grad.data();
    auto src = n.grad.data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

}  // namespace muse
