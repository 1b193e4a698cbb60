// Copyright 2026 seqvr authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "seqvr/core/tensor.hpp"

namespace seqvr {

template <typename T>
class GradStore;

namespace detail {
inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

/// One node of the define-by-run graph. Parents always have smaller ids than
/// their children, so reverse-id order is a valid reverse topological order.
template <typename T>
struct Node {
  Tensor<T> value;
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Receives the upstream gradient for this node and accumulates into the
  // parents' entries of the store.
  std::function<void(const Tensor<T>&, GradStore<T>&)> backward;
};

/// Gradients keyed by node identity. Kept outside the nodes so several
/// threads can differentiate graphs that share parameter leaves.
template <typename T>
class GradStore {
 public:
  void add(const Node<T>* node, const Tensor<T>& g) {
    auto it = grads_.find(node);
    if (it == grads_.end()) {
      grads_.emplace(node, g);
    } else {
      accumulate(it->second, g);
    }
  }

  const Tensor<T>* find(const Node<T>* node) const {
    auto it = grads_.find(node);
    return it == grads_.end() ? nullptr : &it->second;
  }

  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<const Node<T>*, Tensor<T>> grads_;
};

/// Value handle used throughout the differentiable code paths. Copying is
/// cheap (shared graph node). A Var without requires_grad carries no backward
/// closure, so inference graphs cost only the forward values.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) {
    node_ = std::make_shared<Node<T>>();
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->id = detail::next_node_id();
  }

  static Var constant(Tensor<T> value) { return Var(std::move(value), false); }
  static Var leaf(Tensor<T> value) { return Var(std::move(value), true); }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  const std::vector<int>& shape() const { return node_->value.shape(); }

  /// Same value, no history.
  Var detach() const { return constant(node_->value); }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Build a non-leaf node. `backward` may be empty when no parent needs
/// gradients; the parents list is dropped in that case so the graph behind
/// constant subexpressions is freed eagerly.
template <typename T>
inline Var<T> make_op_node(Tensor<T> value, std::vector<Var<T>> parents,
                           std::function<void(const Tensor<T>&, GradStore<T>&)> backward) {
  bool needs_grad = false;
  for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
  Var<T> out(std::move(value), needs_grad);
  if (needs_grad) {
    auto node = std::const_pointer_cast<Node<T>>(out.node());
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return out;
}

/// Reverse-mode sweep from `root` (usually a scalar loss). Gradients for every
/// requires_grad leaf reachable from the root end up in `store`.
template <typename T>
inline void backward(const Var<T>& root, GradStore<T>& store) {
  require(root.defined(), "backward: undefined root");
  require(root.value().numel() == 1, "backward: root must be scalar");
  if (!root.requires_grad()) return;

  // Collect reachable grad-requiring nodes, then run in descending id order.
  std::vector<std::shared_ptr<Node<T>>> order;
  std::unordered_map<const Node<T>*, bool> seen;
  std::vector<std::shared_ptr<Node<T>>> stack{root.node()};
  seen[root.node().get()] = true;
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && !seen[p.get()]) {
        seen[p.get()] = true;
        stack.push_back(p);
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a->id > b->id; });

  store.add(root.node().get(), Tensor<T>::scalar(T(1)));
  for (const auto& n : order) {
    if (!n->backward) continue;
    const Tensor<T>* g = store.find(n.get());
    if (g == nullptr) continue;
    n->backward(*g, store);
  }
}

}  // namespace seqvr
