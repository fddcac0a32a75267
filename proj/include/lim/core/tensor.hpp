// Copyright (c) 2026 The lim authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lim/error.hpp"

namespace lim {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

// Reverse-mode state is confined to one thread: nodes created on a thread
// belong to that thread's implicit tape. Creation order is a topological
// order by construction, so the reverse sweep just sorts by sequence id.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline uint64_t next_node_seq() {
  thread_local uint64_t counter = 0;
  return ++counter;
}

}  // namespace detail

// Disables recording while alive; inference runs tape-free under this guard.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // empty for leaves

  int64_t numel() const { return static_cast<int64_t>(value.size()); }

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

// Dense n-dimensional array participating in reverse-mode differentiation.
// A Tensor is a cheap shared handle to its node; values are treated as
// immutable once produced within a step. Leaf parameters are the only
// tensors mutated in place (by the optimizer, between steps).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel(shape) != static_cast<int64_t>(data.size())) {
      throw DimensionError(detail::str("Tensor: shape ", shape_str(shape),
                                       " does not match data length ", data.size()));
    }
    Tensor t;
    t.node_ = std::make_shared<Node<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    t.node_->seq = detail::next_node_seq();
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> d(static_cast<size_t>(numel(shape)), T(0));
    return from(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    std::vector<T> d(static_cast<size_t>(numel(shape)), fill);
    return from(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from(Shape{}, std::vector<T>{v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t size(int64_t axis) const { return node_->shape[static_cast<size_t>(axis)]; }
  int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> value() const { return node_->value; }

  // In-place access for leaf parameters (optimizer updates, running stats).
  std::vector<T>& values_mut() { return node_->value; }

  T item() const {
    if (numel() != 1) {
      throw DimensionError(detail::str("item: tensor has ", numel(), " elements"));
    }
    return node_->value[0];
  }

  std::span<const T> grad() const {
    const_cast<Node<T>*>(node_.get())->ensure_grad();
    return node_->grad;
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  std::shared_ptr<Node<T>> node() const { return node_; }

  // Reverse sweep from a scalar loss. Visits each recorded op exactly once,
  // newest first; leaf gradients accumulate additively across calls, so the
  // caller resets them between steps.
  void backward() const {
    if (numel() != 1) {
      throw DimensionError(detail::str("backward: loss must be scalar, got shape ",
                                       shape_str(shape())));
    }
    // Collect the reachable differentiable subgraph.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{node_.get()};
    seen.insert(node_.get());
    while (!stack.empty()) {
      Node<T>* n = stack.back();
      stack.pop_back();
      order.push_back(n);
      for (const auto& p : n->parents) {
        if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
      }
    }
    std::sort(order.begin(), order.end(),
              [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });
    // Interior gradients are scratch space for this sweep; only leaves keep
    // accumulated gradients across repeated backward calls.
    for (Node<T>* n : order) {
      if (n->backward_fn && !n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), T(0));
    }
    node_->ensure_grad()[0] += T(1);
    for (Node<T>* n : order) {
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

// Builds an op node: output value plus a closure that routes upstream
// gradients to the inputs. Records nothing when grads are off or no input
// needs them, so the graph (and saved buffers) never materializes.
template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value,
                  std::initializer_list<Tensor<T>> inputs,
                  std::function<void(Node<T>&)> backward) {
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(value), false);
  bool need = grad_mode();
  if (need) {
    need = false;
    for (const auto& in : inputs) need = need || in.requires_grad();
  }
  if (need) {
    auto node = out.node();
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward);
  }
  return out;
}

template <typename T>
void accumulate(Node<T>& target, const std::vector<T>& contribution) {
  auto& g = target.ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
}

}  // namespace detail

}  // namespace lim
