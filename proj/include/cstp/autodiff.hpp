#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cstp/tensor.hpp"

namespace cstp::ad {

/// One vertex of the dynamic computation graph.
struct Node {
  Tensor value;
  Tensor grad;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  Tensor& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && grad.size() > 0; }
};

/// Handle to a graph node. Cheap to copy; copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const& { return node_->value; }
  // Copies out of temporaries so `f(x).value().data()` cannot dangle.
  Tensor value() const&& { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {
inline thread_local bool grad_mode = true;
}

inline bool grad_enabled() { return detail::grad_mode; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

inline Var leaf(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

/// Records an operation result. Parents and the backward closure are only
/// retained when gradients are enabled and some parent needs them.
inline Var record(Tensor value, std::vector<Var> parents,
                  std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (!grad_enabled()) return Var(std::move(node));
  bool needs = false;
  for (const Var& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const Var& p : parents) node->parents.push_back(p.ptr());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

/// Named trainable parameters with stable insertion order.
class ParamStore {
 public:
  Var add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw ValueError("duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, leaf(std::move(init)));
    return entries_.back().second;
  }

  const Var& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  /// Replaces a parameter's value in place; the shape must not change.
  void set(const std::string& name, Tensor value) {
    const Var& v = get(name);
    if (value.shape() != v.shape()) {
      throw ShapeError("parameter '" + name + "' has shape " + to_string(v.shape()) +
                       ", refusing " + to_string(value.shape()));
    }
    v.node().value = std::move(value);
  }

  std::size_t size() const { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : entries_) n += v.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Var>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using GradResult = std::map<std::string, Tensor>;

namespace detail {

inline std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

/// Runs reverse-mode accumulation from a scalar loss. Afterwards every node
/// reachable from the loss holds d(loss)/d(node) in its grad buffer.
inline void backward(const Var& loss) {
  if (loss.size() != 1) {
    throw ShapeError("gradient requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  std::vector<Node*> order = detail::topo_order(&loss.node());
  for (Node* n : order) n->grad = Tensor();
  loss.node().grad_buffer()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->has_grad()) n->backward(*n);
  }
}

/// Gradients of a scalar loss for every parameter reachable from it.
inline GradResult grad(const Var& loss, const ParamStore& params) {
  if (loss.size() != 1) {
    throw ShapeError("gradient requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  GradResult result;
  if (!loss.requires_grad()) return result;
  std::vector<Node*> order = detail::topo_order(&loss.node());
  std::unordered_set<Node*> reachable(order.begin(), order.end());
  backward(loss);
  for (const auto& [name, v] : params) {
    Node* n = &v.node();
    if (!reachable.count(n)) continue;
    result.emplace(name, n->has_grad() ? n->grad : Tensor(n->value.shape()));
  }
  return result;
}

}  // namespace cstp::ad
