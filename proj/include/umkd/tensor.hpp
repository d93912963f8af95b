// Copyright 2026 The UMKD Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "umkd/error.hpp"

namespace umkd {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::int64_t{1},
                         [](std::int64_t a, int b) { return a * b; });
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

// Graph recording is disabled inside a NoGradGuard scope.
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void()> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// RAII scope in which operations do not record an autograd graph.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Dense row-major tensor of doubles with reverse-mode autodiff.
///
/// A Tensor is a shared handle: copies alias the same storage and graph node,
/// the way parameters are shared between a model and its optimizer. Use
/// clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    detail::require(static_cast<std::int64_t>(values.size()) == shape_numel(shape),
                    "tensor: value count " + std::to_string(values.size()) +
                        " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  template <typename Rng>
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  template <typename Rng>
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i < 0 ? i + rank() : i)); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<double> data() { return node_->value; }
  std::span<const double> data() const { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double operator[](std::int64_t i) const { return node_->value[static_cast<std::size_t>(i)]; }

  /// Gradient accumulated by the last backward(); zeros if none reached this tensor.
  std::vector<double> grad() const {
    if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
    return node_->grad;
  }
  std::span<double> grad_storage() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  double item() const {
    detail::require(numel() == 1, "item(): tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
  }

  Tensor detach() const { return Tensor(node_->shape, node_->value, false); }
  Tensor clone() const { return Tensor(node_->shape, node_->value, node_->requires_grad); }

  /// Identity of the underlying storage, for aliasing checks.
  const void* id() const { return node_.get(); }

  // Internal: used by ops to build the graph.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Creates an op output. Records `inputs` (and the backward closure supplied
/// later through set_backward) only when some input needs a gradient.
inline Tensor make_output(Shape shape, std::vector<double> value,
                          std::initializer_list<const Tensor*> inputs) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled()) {
    for (const Tensor* t : inputs) {
      if (t->defined() && t->requires_grad()) {
        n->requires_grad = true;
        break;
      }
    }
    if (n->requires_grad) {
      for (const Tensor* t : inputs)
        if (t->defined()) n->inputs.push_back(t->node());
    }
  }
  return Tensor(std::move(n));
}

inline Tensor make_output(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled()) {
    for (const auto& t : inputs) n->requires_grad = n->requires_grad || t.requires_grad();
    if (n->requires_grad)
      for (const auto& t : inputs) n->inputs.push_back(t.node());
  }
  return Tensor(std::move(n));
}

/// Installs a backward closure on `out` if it participates in the graph.
/// The closure receives the output gradient.
template <typename F>
void set_backward(Tensor& out, F&& fn) {
  if (!out.requires_grad()) return;
  Node* self = out.node().get();
  self->backward_fn = [self, f = std::forward<F>(fn)]() { f(std::span<const double>(self->grad)); };
}

/// Accumulation target for an input's gradient, or nullptr if it needs none.
inline std::vector<double>* grad_sink(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  return &t.node()->ensure_grad();
}

}  // namespace detail

/// Runs reverse-mode differentiation from a scalar tensor. Gradients
/// accumulate into every reachable tensor that requires them.
inline void backward(const Tensor& loss) {
  detail::require(loss.numel() == 1, "backward(): loss must be a scalar, got shape " +
                                         shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  // Iterative post-order DFS; recursion depth would otherwise track graph depth.
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn();
  }
  // Release intermediate gradients so repeated backward calls stay independent.
  for (detail::Node* n : order)
    if (n->backward_fn) n->grad.clear();
}

}  // namespace umkd
