#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <vector>

#include "iqa/common.hpp"

namespace iqa {

// Thread-local switch; NoGradGuard turns graph recording off for a scope.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool prev_;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first use, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void()> backward_fn;  // empty for leaves

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

// Dense row-major n-d array with reverse-mode differentiation. Value
// semantics over a shared node: copies alias the same storage, which is
// what the graph wants.
template <typename T>
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T v) {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->value.assign(static_cast<size_t>(numel(shape)), v);
    t.node_->shape = std::move(shape);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data) {
    if (static_cast<int64_t>(data.size()) != numel(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    return t;
  }

  static Tensor scalar(T v) { return full({}, v); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(node_->value.size()); }

  std::span<T> data() { return {node_->value.data(), node_->value.size()}; }
  std::span<const T> data() const {
    return {node_->value.data(), node_->value.size()};
  }

  std::span<T> grad() {
    node_->ensure_grad();
    return {node_->grad.data(), node_->grad.size()};
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }

  void zero_grad() {
    if (!node_->grad.empty())
      std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    if (size() != 1)
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

  // Reverse-mode sweep from a scalar output. Gradients accumulate into every
  // reachable node that requires grad.
  void backward() {
    if (size() != 1)
      throw ShapeError("backward() needs a scalar, got " + shape_str(shape()));
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    topo(node_.get(), seen, order);
    node_->ensure_grad();
    node_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if ((*it)->backward_fn) (*it)->backward_fn();
  }

private:
  static void topo(TensorNode<T>* root, std::unordered_set<TensorNode<T>*>& seen,
                   std::vector<TensorNode<T>*>& order) {
    // Iterative post-order; graphs from long training steps overflow the
    // call stack otherwise.
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    if (!seen.insert(root).second) return;
    stack.emplace_back(root, 0);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        TensorNode<T>* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second)
          stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<TensorNode<T>> node_;
};

// Graph-construction helper shared by every op: marks the output as
// requiring grad and records parents + closure only when the tape is on.
template <typename T>
void attach(Tensor<T>& out, std::vector<std::shared_ptr<TensorNode<T>>> parents,
            std::function<void()> backward_fn) {
  if (!grad_enabled()) return;
  bool any = false;
  for (auto& p : parents)
    if (p->requires_grad) any = true;
  if (!any) return;
  out.set_requires_grad(true);
  out.node()->parents = std::move(parents);
  out.node()->backward_fn = std::move(backward_fn);
}

// Learnable parameter: value tensor flagged for grad, with a persistent
// gradient buffer reset between steps.
template <typename T>
struct Param {
  Tensor<T> value;

  Param() = default;
  explicit Param(Tensor<T> v) : value(std::move(v)) {
    value.set_requires_grad(true);
    value.grad();  // allocate now so grad shape always equals value shape
  }

  std::span<T> data() { return value.data(); }
  std::span<T> grad() { return value.grad(); }
  int64_t size() const { return value.size(); }
  void zero_grad() { value.zero_grad(); }
};

}  // namespace iqa
