#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "advcomm/diffcore/param_tree.hpp"
#include "advcomm/diffcore/tensor.hpp"

namespace advcomm::diffcore {

template <typename T>
class Tape;

/// Handle to a node on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Computation record: an append-only list of nodes in creation order, which
/// is a topological order, so backward is a single reverse sweep.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Tensor<T> value) { return push("constant", std::move(value), false, {}); }

  Var<T> variable(Tensor<T> value) {
    return push("variable", std::move(value), grad_enabled_, {});
  }

  /// Leaf bound to `params[path]`. Repeated requests for one path return the
  /// same node, so shared parameters accumulate a single gradient.
  Var<T> param(const ParamTree<T>& params, const std::string& path, bool trainable = true) {
    if (auto it = param_ids_.find(path); it != param_ids_.end()) return Var<T>{this, it->second};
    auto v = push("param", params.at(path), grad_enabled_ && trainable, {});
    nodes_[v.id].param_path = path;
    param_ids_.emplace(path, v.id);
    return v;
  }

  /// Records an operation output. The backward function is kept only when an
  /// input requires a gradient.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward) {
    bool needs = false;
    if (grad_enabled_) {
      for (const auto& in : inputs) {
        check_owner(in);
        needs = needs || nodes_[in.id].requires_grad;
      }
    }
    if (!value.all_finite()) {
      throw std::runtime_error(std::string("non-finite value produced by ") + op);
    }
    return push(op, std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
  }

  Var<T> record(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                BackwardFn backward) {
    bool needs = false;
    if (grad_enabled_) {
      for (const auto& in : inputs) {
        check_owner(in);
        needs = needs || nodes_[in.id].requires_grad;
      }
    }
    if (!value.all_finite()) {
      throw std::runtime_error(std::string("non-finite value produced by ") + op);
    }
    return push(op, std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
  }

  const Tensor<T>& value(Var<T> v) const {
    check_owner(v);
    return nodes_[v.id].value;
  }

  bool requires_grad(Var<T> v) const {
    check_owner(v);
    return nodes_[v.id].requires_grad;
  }

  /// Gradient accumulated for `v`; zeros when nothing reached it.
  Tensor<T> grad(Var<T> v) const {
    check_owner(v);
    const auto& n = nodes_[v.id];
    if (n.has_grad) return n.grad;
    return Tensor<T>(n.value.shape());
  }

  /// Accumulator for node `id`; callers add into it. Null when the node does
  /// not require a gradient.
  Tensor<T>* grad_sink(Var<T> v) {
    auto& n = nodes_[v.id];
    if (!n.requires_grad) return nullptr;
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return &n.grad;
  }

  void backward(Var<T> loss) {
    check_owner(loss);
    const auto& lv = nodes_[loss.id].value;
    if (lv.size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(lv.shape()));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor<T>();
    }
    auto* seed = grad_sink(loss);
    if (!seed) return;
    seed->fill(T{1});
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (!n.has_grad || !n.backward) continue;
      // no nodes are appended during the sweep, so the reference stays valid
      n.backward(*this, n.grad);
    }
  }

  /// Gradient tree with the structure of `params`; entries never reached by
  /// the loss are exact zeros.
  ParamTree<T> gradients(const ParamTree<T>& params) const {
    ParamTree<T> out;
    for (const auto& [path, value] : params) {
      auto it = param_ids_.find(path);
      if (it != param_ids_.end() && nodes_[it->second].has_grad) {
        out.set(path, nodes_[it->second].grad);
      } else {
        out.set(path, Tensor<T>(value.shape()));
      }
    }
    return out;
  }

  std::size_t size() const { return nodes_.size(); }

  // Branch log: piecewise ops append which side of each kink an element fell
  // on, so a finite-difference stencil that straddles a kink can be detected.
  void track_branches(bool on) { track_branches_ = on; }
  bool tracking_branches() const { return track_branches_; }
  void note_branch(bool b) { branches_.push_back(b); }
  const std::vector<bool>& branches() const { return branches_; }
  const char* op_name(Var<T> v) const { return nodes_[v.id].op; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
    const char* op = "";
    std::string param_path;
  };

  Var<T> push(const char* op, Tensor<T> value, bool requires_grad, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(fn);
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  void check_owner(Var<T> v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw std::invalid_argument("variable does not belong to this tape");
    }
  }

  bool grad_enabled_;
  bool track_branches_ = false;
  std::vector<bool> branches_;
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_ids_;
};

}  // namespace advcomm::diffcore
