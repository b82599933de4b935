#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ftsp/errors.hpp"

namespace ftsp {

using Real = double;
using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph construction for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(TensorImpl&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  std::vector<Real>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor from_data(Shape shape, std::vector<Real> data, bool requires_grad = false) {
    if (numel_of(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }
  static Tensor full(Shape shape, Real value, bool requires_grad = false) {
    std::vector<Real> data(numel_of(shape), value);
    return from_data(std::move(shape), std::move(data), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }
  static Tensor scalar(Real value, bool requires_grad = false) {
    return from_data({}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t dim(std::ptrdiff_t axis) const {
    const auto r = static_cast<std::ptrdiff_t>(rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) {
      throw DimensionError("axis out of range for shape " + shape_str(shape()));
    }
    return impl_->shape[static_cast<std::size_t>(axis)];
  }

  const std::vector<Real>& data() const { return impl_->data; }
  std::vector<Real>& mutable_data() { return impl_->data; }
  const std::vector<Real>& grad() const { return impl_->grad; }
  std::vector<Real>& mutable_grad() { return impl_->ensure_grad(); }
  bool has_grad() const { return impl_->grad.size() == impl_->data.size() && numel() > 0; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    return *this;
  }

  Real item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  Real operator[](std::size_t flat) const { return impl_->data[flat]; }
  Real at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw DimensionError("index rank mismatch");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
      if (i >= impl_->shape[axis]) throw DimensionError("index out of range");
      flat = flat * impl_->shape[axis] + i;
      ++axis;
    }
    return impl_->data[flat];
  }

  // Leaf copy with no history.
  Tensor detach() const { return from_data(shape(), data(), false); }

  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  void backward() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }
  const char* op() const { return impl_->op; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Topologically ordered record of the ops reachable from a root (parents first).
class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<const TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(root.impl(), 0);
    visited.insert(root.impl());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        TensorImpl* parent = node->parents[next++].get();
        if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        tape.nodes_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<TensorImpl*>& nodes() const { return nodes_; }

  // Runs every recorded backward function once, in reverse topological order.
  void run_backward() const {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      TensorImpl* node = *it;
      if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    for (TensorImpl* node : nodes_) {
      if (!node->is_leaf()) {
        node->grad.clear();
        node->grad.shrink_to_fit();
      }
    }
  }

 private:
  std::vector<TensorImpl*> nodes_;
};

inline void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  if (!requires_grad()) return;
  Tape tape = Tape::record(*this);
  impl_->ensure_grad()[0] += 1.0;
  tape.run_backward();
}

namespace detail {

inline void check_finite(const std::vector<Real>& values, const char* op) {
  for (Real v : values) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value produced by ") + op);
  }
}

// Builds an op output and wires it into the graph when any input needs grad.
inline Tensor make_result(const char* op, Shape shape, std::vector<Real> data,
                          std::initializer_list<Tensor> inputs,
                          std::function<void(TensorImpl&)> backward) {
  check_finite(data, op);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->op = op;
  if (grad_enabled()) {
    for (const Tensor& in : inputs) {
      if (in.defined() && in.requires_grad()) {
        impl->requires_grad = true;
        impl->parents.push_back(in.impl_ptr());
      }
    }
    if (impl->requires_grad) impl->backward_fn = std::move(backward);
  }
  return Tensor(std::move(impl));
}

inline Tensor make_result(const char* op, Shape shape, std::vector<Real> data,
                          const std::vector<Tensor>& inputs,
                          std::function<void(TensorImpl&)> backward) {
  check_finite(data, op);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->op = op;
  if (grad_enabled()) {
    for (const Tensor& in : inputs) {
      if (in.defined() && in.requires_grad()) {
        impl->requires_grad = true;
        impl->parents.push_back(in.impl_ptr());
      }
    }
    if (impl->requires_grad) impl->backward_fn = std::move(backward);
  }
  return Tensor(std::move(impl));
}

// Parent grad buffer, or nullptr when the parent is not being differentiated.
inline std::vector<Real>* grad_of(const std::shared_ptr<TensorImpl>& p) {
  if (!p || !p->requires_grad) return nullptr;
  return &p->ensure_grad();
}

}  // namespace detail
}  // namespace ftsp
