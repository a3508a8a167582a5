#pragma once

// Minimal tape-based reverse-mode differentiation over row-major matrices.
//
// A Graph records every intermediate value together with a closure that
// propagates the output gradient back to its parents. Parameters live
// outside the graph in a ParamSet; their gradients are accumulated into a
// GradSet so that several graphs (one per batch element) can run on
// separate threads and be reduced in a fixed order afterwards.

#include "mscl/common.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <utility>

namespace mscl {

using ParamId = int;

template <typename T>
class ParamSet {
 public:
  ParamId add(std::string name, Mat<T> init) {
    for (const auto& n : names_)
      if (n == name) throw ConfigError("duplicate parameter name: " + name);
    names_.push_back(std::move(name));
    values_.push_back(std::move(init));
    return static_cast<ParamId>(values_.size() - 1);
  }

  const Mat<T>& value(ParamId id) const { return values_.at(static_cast<size_t>(id)); }
  Mat<T>& value(ParamId id) { return values_.at(static_cast<size_t>(id)); }
  const std::string& name(ParamId id) const { return names_.at(static_cast<size_t>(id)); }
  int size() const { return static_cast<int>(values_.size()); }

  std::optional<ParamId> find(std::string_view name) const {
    for (size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return static_cast<ParamId>(i);
    return std::nullopt;
  }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& v : values_) n += static_cast<size_t>(v.size());
    return n;
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (size_t i = 0; i < values_.size(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Mat<T>> values_;
};

template <typename T>
class GradSet {
 public:
  GradSet() = default;
  explicit GradSet(const ParamSet<T>& params) {
    grads_.reserve(static_cast<size_t>(params.size()));
    for (ParamId i = 0; i < params.size(); ++i) {
      const auto& v = params.value(i);
      grads_.push_back(Mat<T>::Zero(v.rows(), v.cols()));
    }
  }

  Mat<T>& operator[](ParamId id) { return grads_.at(static_cast<size_t>(id)); }
  const Mat<T>& operator[](ParamId id) const { return grads_.at(static_cast<size_t>(id)); }
  int size() const { return static_cast<int>(grads_.size()); }

  void zero() {
    for (auto& g : grads_) g.setZero();
  }
  void add(const GradSet& other) {
    for (size_t i = 0; i < grads_.size(); ++i) grads_[i] += other.grads_[i];
  }
  void scale(T s) {
    for (auto& g : grads_) g *= s;
  }
  bool all_finite() const {
    for (const auto& g : grads_)
      if (!g.allFinite()) return false;
    return true;
  }

 private:
  std::vector<Mat<T>> grads_;
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
class Graph {
 public:
  // Receives the graph and the id of the node being differentiated.
  using BackwardFn = std::function<void(Graph&, Var self)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Mat<T> v) { return push(std::move(v), nullptr, false, -1); }
  // Leaf whose gradient is wanted (e.g. an input under a finite-difference check).
  Var input(Mat<T> v) { return push(std::move(v), nullptr, grad_enabled_, -1); }
  Var param(const ParamSet<T>& params, ParamId id) {
    return push(Mat<T>(), &params.value(id), grad_enabled_, id);
  }

  const Mat<T>& value(Var v) const {
    const Node& n = node(v);
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(Var v) const { return node(v).requires_grad; }

  // Gradient of a node after backward(); zero-sized if nothing flowed there.
  const Mat<T>& grad(Var v) const { return node(v).grad; }

  // Lazily zero-initialised gradient buffer, used by backward closures.
  Mat<T>& grad_ref(Var v) {
    Node& n = node(v);
    if (n.grad.size() == 0) {
      const Mat<T>& val = value(v);
      n.grad = Mat<T>::Zero(val.rows(), val.cols());
    }
    return n.grad;
  }

  // Records an operation result. The closure is kept only when at least one
  // parent carries a gradient.
  Var emit(Mat<T> value, std::initializer_list<Var> parents, BackwardFn fn) {
    return emit(std::move(value), std::vector<Var>(parents), std::move(fn));
  }
  Var emit(Mat<T> value, const std::vector<Var>& parents, BackwardFn fn) {
    bool rg = false;
    if (grad_enabled_)
      for (Var p : parents) rg = rg || (p.valid() && node(p).requires_grad);
    Var out = push(std::move(value), nullptr, rg, -1);
    if (rg) nodes_.back().backward = std::move(fn);
    return out;
  }

  // Reverse sweep from a 1x1 loss node. Parameter gradients are added into
  // `grads` when given.
  void backward(Var loss, GradSet<T>* grads = nullptr) {
    if (value(loss).size() != 1) throw ShapeError("backward: loss must be a scalar");
    if (!node(loss).requires_grad) return;
    grad_ref(loss)(0, 0) += T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, Var{i});
    }
    if (grads) {
      for (const Node& n : nodes_)
        if (n.param >= 0 && n.grad.size() != 0) (*grads)[n.param] += n.grad;
    }
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<T> value;
    const Mat<T>* external = nullptr;
    Mat<T> grad;
    bool requires_grad = false;
    ParamId param = -1;
    BackwardFn backward;
  };

  Var push(Mat<T> value, const Mat<T>* external, bool requires_grad, ParamId param) {
    Node n;
    n.value = std::move(value);
    n.external = external;
    n.requires_grad = requires_grad;
    n.param = param;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  Node& node(Var v) {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) throw ShapeError("invalid graph variable");
    return nodes_[static_cast<size_t>(v.id)];
  }
  const Node& node(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) throw ShapeError("invalid graph variable");
    return nodes_[static_cast<size_t>(v.id)];
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

}  // namespace mscl
