// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor with a reverse-mode autodiff tape.
//
// A Tensor is a cheap handle onto a shared Node. Operations that see at least
// one input requiring a gradient record their inputs and a backward closure on
// the output node; backward() walks the recorded DAG once in reverse
// topological order and then releases it.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cfd/error.hpp"

namespace cfd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn && !consumed; }

  std::span<T> ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    if (numel_of(shape) != data.size())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + to_string(shape));
    for (auto e : shape)
      if (e == 0) throw ShapeError("zero extent in shape " + to_string(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

  template <typename Rng>
  static Tensor uniform(Shape shape, T lo, T hi, Rng& rng, bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    std::vector<T> d(numel_of(shape));
    for (auto& v : d) v = static_cast<T>(dist(rng));
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }
  template <typename Rng>
  static Tensor normal(Shape shape, T mean, T stddev, Rng& rng, bool requires_grad = false) {
    std::normal_distribution<double> dist(static_cast<double>(mean), static_cast<double>(stddev));
    std::vector<T> d(numel_of(shape));
    for (auto& v : d) v = static_cast<T>(dist(rng));
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T> to_vector() const { return node_->data; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool r) {
    if (!node_->is_leaf()) throw GraphError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = r;
    return *this;
  }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  /// Gradient buffer; zeros when nothing has been accumulated yet.
  std::vector<T> grad() const {
    if (has_grad()) return node_->grad;
    return std::vector<T>(numel(), T(0));
  }
  std::span<T> grad_span() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  const char* op() const { return node_->op; }
  bool is_leaf() const { return node_->is_leaf(); }

  /// A fresh leaf holding a copy of the values (no history).
  Tensor detach() const { return Tensor(shape(), to_vector(), false); }
  Tensor clone_leaf(bool requires_grad) const { return Tensor(shape(), to_vector(), requires_grad); }

  bool all_finite() const {
    return std::all_of(node_->data.begin(), node_->data.end(), [](T v) { return std::isfinite(v); }) &&
           std::all_of(node_->grad.begin(), node_->grad.end(), [](T v) { return std::isfinite(v); });
  }

  NodePtr node() const { return node_; }
  bool same_node(const Tensor& o) const { return node_ == o.node_; }

 private:
  NodePtr node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

/// Builds an op result. The graph edge is only recorded when grad mode is on
/// and at least one input requires a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  bool needs = false;
  if (grad_enabled())
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  auto n = out.node();
  n->op = op;
  if (needs) {
    n->requires_grad = true;
    for (const auto& in : inputs) n->inputs.push_back(in.node());
    n->backward_fn = std::move(backward_fn);
  }
  return out;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op, const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  bool needs = false;
  if (grad_enabled())
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  auto n = out.node();
  n->op = op;
  if (needs) {
    n->requires_grad = true;
    for (const auto& in : inputs) n->inputs.push_back(in.node());
    n->backward_fn = std::move(backward_fn);
  }
  return out;
}

/// Reverse-mode sweep from a scalar loss. Accumulates into every reachable
/// leaf that requires a gradient, then releases the interior graph.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw GraphError("backward on undefined tensor");
  if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss, got " + to_string(loss.shape()));
  auto root = loss.node();
  if (root->consumed) throw GraphError("graph already consumed by a previous backward call");
  if (!root->requires_grad) throw GraphError("loss is detached: no input requires a gradient");

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->consumed) throw GraphError("graph already consumed by a previous backward call");
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
  for (Node<T>* n : order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->inputs.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
      n->consumed = true;
    }
  }
}

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    out[i] = std::max(ea, eb);
  }
  return out;
}

/// Strides of `in` viewed in the (right-aligned) output shape; zero on
/// broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    st[i + off] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return st;
}

/// Calls f(out_index, a_index, b_index) over every element of `out`.
template <typename F>
void for_each_broadcast(const Shape& out_shape, const std::vector<std::size_t>& sa_in, const std::vector<std::size_t>& sb_in,
                        F&& f) {
  if (out_shape.empty()) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  // Merge adjacent axes that stay contiguous in both operands.
  Shape out{out_shape[0]};
  std::vector<std::size_t> sa{sa_in[0]}, sb{sb_in[0]};
  for (std::size_t d = 1; d < out_shape.size(); ++d) {
    if (out_shape[d] == 1) continue;
    if (out.back() == 1) {
      out.back() = out_shape[d];
      sa.back() = sa_in[d];
      sb.back() = sb_in[d];
    } else if (sa.back() == sa_in[d] * out_shape[d] && sb.back() == sb_in[d] * out_shape[d]) {
      out.back() *= out_shape[d];
      sa.back() = sa_in[d];
      sb.back() = sb_in[d];
    } else {
      out.push_back(out_shape[d]);
      sa.push_back(sa_in[d]);
      sb.push_back(sb_in[d]);
    }
  }
  const std::size_t r = out.size();
  const std::size_t total = numel_of(out);
  const std::size_t inner = out[r - 1];
  const std::size_t ia_step = sa[r - 1], ib_step = sb[r - 1];
  auto run = [&](std::size_t o, std::size_t a, std::size_t b) {
    // Constant steps let the common patterns vectorize.
    if (ia_step == 1 && ib_step == 1) {
      for (std::size_t k = 0; k < inner; ++k) f(o + k, a + k, b + k);
    } else if (ia_step == 1 && ib_step == 0) {
      for (std::size_t k = 0; k < inner; ++k) f(o + k, a + k, b);
    } else if (ia_step == 0 && ib_step == 1) {
      for (std::size_t k = 0; k < inner; ++k) f(o + k, a, b + k);
    } else {
      for (std::size_t k = 0; k < inner; ++k, a += ia_step, b += ib_step) f(o + k, a, b);
    }
  };
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    run(o, ia, ib);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail
}  // namespace cfd
