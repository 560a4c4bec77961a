// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over a graph recorded during the
// forward pass. Every op produces a Node holding its value, its inputs and a
// closure that pushes the node's gradient into the inputs' gradients.
#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gmnet/tensor.hpp"

namespace gmnet {

template <typename T>
struct Node;

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
  using BackwardFn = std::function<void(Node&)>;

  Tensor<T> value;
  std::string op;
  std::vector<Var<T>> inputs;
  std::optional<Tensor<T>> grad;
  bool requires_grad = false;
  bool trainable = false;
  BackwardFn backward_fn;

  /// Gradient buffer, allocated as zeros on first use.
  Tensor<T>& grad_buffer() {
    if (!grad) grad.emplace(value.shape(), T{0});
    return *grad;
  }

  void accumulate_grad(const Tensor<T>& g) {
    if (g.shape() != value.shape()) {
      throw std::invalid_argument("gradient shape " + shape_str(g.shape()) + " does not match value shape " +
                                  shape_str(value.shape()) + " at op " + op);
    }
    if (!grad) {
      grad.emplace(g);
      return;
    }
    T* buf = grad->ptr();
    const T* src = g.ptr();
    for (std::size_t i = 0; i < grad->numel(); ++i) buf[i] += src[i];
  }
};

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_enabled() { return detail::grad_enabled; }

/// Disables graph recording for its lifetime (evaluation, shape checks).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = "constant";
  return n;
}

template <typename T>
Var<T> parameter(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = "parameter";
  n->requires_grad = true;
  n->trainable = true;
  return n;
}

/// Wraps an op result. The backward closure and input references are kept
/// only when some input needs a gradient and recording is enabled.
template <typename T>
Var<T> make_node(Tensor<T> value, std::string op, std::vector<Var<T>> inputs,
                 typename Node<T>::BackwardFn fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = std::move(op);
  const bool needs = grad_enabled() && std::any_of(inputs.begin(), inputs.end(),
                                                   [](const Var<T>& v) { return v && v->requires_grad; });
  if (needs) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward_fn = std::move(fn);
  }
  return n;
}

/// Populates grad on every node reachable from `loss` that requires one.
/// Gradients accumulate, so callers reset parameters with zero_grads between steps.
template <typename T>
void backward(const Var<T>& loss) {
  if (loss->value.numel() != 1 || loss->value.rank() > 1) {
    throw std::invalid_argument("backward() needs a scalar loss, got shape " + shape_str(loss->value.shape()));
  }
  if (!loss->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.get(), 0}};
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn && node->grad) node->backward_fn(*node);
  }
  // Interior gradients are not needed after the sweep; leaves keep theirs.
  for (Node<T>* node : order) {
    if (node->backward_fn && node != loss.get()) node->grad.reset();
  }
}

/// Trainable nodes keyed by hierarchical name, iterated in insertion order.
template <typename T>
class ParamSet {
 public:
  using Entry = std::pair<std::string, Var<T>>;

  void add(const std::string& name, Var<T> node) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(node));
  }

  const Var<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second].second;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [name, v] : entries_) n += v->value.numel();
    return n;
  }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grads() const {
    for (const auto& [name, v] : entries_) v->grad.reset();
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

/// Central differences (f(p+eps) - f(p-eps)) / 2eps for every element of every
/// parameter. `f` must be deterministic; parameter values are restored afterwards.
template <typename T, typename F>
GradMap<T> finite_diff_grad(F&& f, const ParamSet<T>& params, T eps) {
  if (!(eps > T{0})) throw std::invalid_argument("finite_diff_grad needs eps > 0");
  GradMap<T> out;
  for (const auto& [name, node] : params) {
    Tensor<T> g(node->value.shape());
    for (std::size_t i = 0; i < node->value.numel(); ++i) {
      const T saved = node->value[i];
      node->value[i] = saved + eps;
      const T up = f();
      node->value[i] = saved - eps;
      const T down = f();
      node->value[i] = saved;
      g[i] = (up - down) / (T{2} * eps);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

/// Central difference at a single element of one node's value.
template <typename T, typename F>
T finite_diff_at(F&& f, Node<T>& node, std::size_t index, T eps) {
  const T saved = node.value[index];
  node.value[index] = saved + eps;
  const T up = f();
  node.value[index] = saved - eps;
  const T down = f();
  node.value[index] = saved;
  return (up - down) / (T{2} * eps);
}

/// |a - b| relative to the larger magnitude, with `floor` guarding the
/// comparison of two vanishing gradients.
template <typename T>
T relative_error(T a, T b, T floor = T{1e-8}) {
  const T denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

}  // namespace gmnet
