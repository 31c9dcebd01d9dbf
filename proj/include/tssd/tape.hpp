#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tssd/error.hpp"
#include "tssd/params.hpp"
#include "tssd/tensor.hpp"

namespace tssd {

template <class Real>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// tape generation it was created in is current.
template <class Real>
class Var {
 public:
  Var() = default;

  const Tensor<Real>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }

  Tape<Real>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  std::uint64_t generation() const { return generation_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape<Real>;
  Var(Tape<Real>* tape, std::size_t id, std::uint64_t gen)
      : tape_(tape), id_(id), generation_(gen) {}

  Tape<Real>* tape_ = nullptr;
  std::size_t id_ = 0;
  std::uint64_t generation_ = 0;
};

/// Dynamically recorded operation list for reverse-mode differentiation.
///
/// Every op appends one node holding its output value and a backward rule.
/// backward() walks the nodes in reverse record order, each rule adding its
/// contribution into the gradient buffers of its inputs. Nodes that do not
/// depend on a parameter carry no rule and no gradient buffer.
template <class Real>
class Tape {
 public:
  /// Called with the tape and the id of the node being differentiated.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Real> constant(Tensor<Real> value) {
    return push(std::move(value), false, nullptr, nullptr);
  }

  /// Binds a trainable tensor as a leaf. Binding the same tensor twice returns
  /// the same leaf. After backward() the tensor's grad() holds dloss/dparam.
  Var<Real> param(Tensor<Real>& tensor) {
    check_open();
    auto it = bound_.find(&tensor);
    if (it != bound_.end()) return Var<Real>(this, it->second, generation_);
    Var<Real> v = push(tensor, grad_enabled_, nullptr, &tensor);
    bound_.emplace(&tensor, v.id());
    return v;
  }

  Var<Real> param(ParamSet<Real>& params, const std::string& name) {
    return param(params[name]);
  }

  /// Appends an op result. `fn` is kept only if some input needs a gradient.
  Var<Real> record(Tensor<Real> value, std::initializer_list<Var<Real>> inputs,
                   BackwardFn fn) {
    bool needs_grad = false;
    for (const Var<Real>& in : inputs) {
      check(in);
      needs_grad = needs_grad || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), needs_grad, needs_grad ? std::move(fn) : nullptr,
                nullptr);
  }

  const Tensor<Real>& value(const Var<Real>& v) const {
    check(v);
    return nodes_[v.id()].value;
  }
  const Tensor<Real>& value_at(std::size_t id) const { return nodes_.at(id).value; }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(const Var<Real>& v) const {
    check(v);
    return nodes_[v.id()].requires_grad;
  }

  /// Gradient flowing into node `id` (valid inside its backward rule).
  std::span<const Real> grad_at(std::size_t id) const { return nodes_.at(id).grad; }

  /// Accumulation buffer of node `id`, or nullptr when the node needs no
  /// gradient. Allocated as zeros on first use.
  Real* grad_sink(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value.size(), Real(0));
    return n.grad.data();
  }

  /// Differentiates the scalar `loss` with respect to every bound parameter.
  /// Consumes the tape: recording or a second backward requires reset().
  void backward(const Var<Real>& loss) {
    check(loss);
    if (consumed_) throw TapeError("backward: tape already consumed; call reset()");
    if (nodes_[loss.id()].value.size() != 1) {
      throw TapeError("backward: loss must be scalar, got shape " +
                      shape_str(nodes_[loss.id()].value.shape()));
    }
    visits_ = 0;
    if (Real* g = grad_sink(loss.id())) g[0] = Real(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.fn && !n.grad.empty()) {
        n.fn(*this, i);
        ++visits_;
      }
    }
    for (Node& n : nodes_) {
      if (!n.param) continue;
      if (n.grad.empty()) {
        n.param->zero_grad();
      } else {
        n.param->grad() = n.grad;
      }
    }
    consumed_ = true;
  }

  /// Drops all nodes and starts a new generation; older handles become invalid.
  void reset() {
    nodes_.clear();
    bound_.clear();
    consumed_ = false;
    ++generation_;
  }

  /// With gradients disabled, params are recorded as constants and no
  /// backward rules are kept (inference).
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }
  std::uint64_t generation() const { return generation_; }
  /// Number of backward rules run by the last backward().
  std::size_t last_backward_visits() const { return visits_; }

  void check(const Var<Real>& v) const {
    if (v.tape() != this) throw TapeError("tape: value belongs to a different tape");
    if (v.generation() != generation_ || v.id() >= nodes_.size()) {
      throw TapeError("tape: stale value from a previous generation");
    }
  }

 private:
  struct Node {
    Tensor<Real> value;
    std::vector<Real> grad;
    BackwardFn fn;
    Tensor<Real>* param = nullptr;
    bool requires_grad = false;
  };

  void check_open() const {
    if (consumed_) throw TapeError("tape: recording after backward; call reset()");
  }

  Var<Real> push(Tensor<Real> value, bool requires_grad, BackwardFn fn,
                 Tensor<Real>* param) {
    check_open();
    value.clear_grad();
    nodes_.push_back(Node{std::move(value), {}, std::move(fn), param, requires_grad});
    return Var<Real>(this, nodes_.size() - 1, generation_);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<Real>*, std::size_t> bound_;
  std::uint64_t generation_ = 1;
  std::size_t visits_ = 0;
  bool consumed_ = false;
  bool grad_enabled_ = true;
};

/// Runs the tape backward from `loss`. Afterwards every trainable entry of
/// `params` holds dloss/dparam in grad(); entries the loss does not reach get
/// zeros.
template <class Real>
void backward(const Var<Real>& loss, ParamSet<Real>& params) {
  if (!loss.valid()) throw TapeError("backward: loss is not on a tape");
  params.zero_grads();
  loss.tape()->backward(loss);
}

}  // namespace tssd
