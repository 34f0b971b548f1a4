#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "glaucad/error.hpp"

namespace glaucad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

// Dense row-major tensor with shared ownership of its storage.
//
// Copies of a Tensor alias the same storage, which is what lets the tape
// deliver gradients back to tensors held elsewhere (parameters, tapped
// activations). Use clone() for a deep copy.
template <class T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    validate(shape);
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    validate(shape);
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node().shape; }
  std::size_t dim(std::size_t i) const { return node().shape.at(i); }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t numel() const { return node().data.size(); }

  std::span<T> data() { return node().data; }
  std::span<const T> data() const { return node().data; }
  const std::vector<T>& values() const { return node().data; }

  T& operator[](std::size_t i) { return node().data[i]; }
  T operator[](std::size_t i) const { return node().data[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node().data[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool on) { node().requires_grad = on; }

  bool has_grad() const { return node().grad.size() == node().data.size(); }
  std::span<const T> grad() const {
    if (!has_grad()) throw Error("tensor has no gradient");
    return node().grad;
  }
  std::span<T> mutable_grad() {
    node().ensure_grad();
    return node().grad;
  }
  void zero_grad() { node().grad.clear(); }

  Tensor clone() const {
    Tensor out(shape(), std::vector<T>(values()), requires_grad());
    return out;
  }

  // Same data, converted to another precision; gradients are not carried.
  template <class U>
  Tensor<U> cast() const {
    std::vector<U> v(numel());
    std::transform(values().begin(), values().end(), v.begin(),
                   [](T x) { return static_cast<U>(x); });
    return Tensor<U>(shape(), std::move(v));
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel()) {
      throw ShapeError("cannot reshape " + shape_str(shape()) + " to " + shape_str(s));
    }
    return Tensor(std::move(s), std::vector<T>(values()), requires_grad());
  }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::Node<T>>& handle() const { return node_; }

 private:
  static void validate(const Shape& s) {
    if (s.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (auto e : s) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(s));
    }
  }

  detail::Node<T>& node() const {
    if (!node_) throw Error("use of undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node<T>> node_;
};

template <class T>
void check_finite(std::span<const T> values, const char* where) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + where);
  }
}

// Ordered record of differentiable operations for reverse-mode autodiff.
//
// Each entry keeps its inputs and output alive and owns a closure that reads
// the output gradient and accumulates into the inputs. Entries are appended
// in execution order, so the list is topologically sorted.
template <class T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  struct Entry {
    std::string kind;
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void()> backward;
  };

  // True when an op over these inputs should be recorded.
  static bool wants(const Tape* tape, std::initializer_list<const Tensor<T>*> inputs) {
    if (tape == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor<T>* t) { return t && t->defined() && t->requires_grad(); });
  }

  void record(std::string kind, std::vector<NodePtr> inputs, NodePtr output,
              std::function<void()> backward) {
    output->requires_grad = true;
    entries_.push_back({std::move(kind), std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
};

// Reverse pass from a scalar loss recorded on `tape`.
//
// Gradients accumulate (+=) into every node that requires grad, so fan-out is
// summed and repeated calls without zero_grad() add up. Interior nodes keep
// their gradient too, which is how Grad-CAM reads d(logit)/d(activation).
// The tape is cleared afterwards.
template <class T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  const auto& entries = tape.entries();
  auto it = std::find_if(entries.rbegin(), entries.rend(),
                         [&](const auto& e) { return e.output == loss.handle(); });
  if (it == entries.rend()) {
    throw Error("backward: loss tensor was not produced on this tape (detached tensor)");
  }
  auto& root = *loss.handle();
  root.ensure_grad();
  root.grad[0] += T(1);
  for (; it != entries.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
  for (const auto& e : entries) {
    for (const auto& in : e.inputs) {
      if (!in->grad.empty()) check_finite<T>(in->grad, "backward");
    }
  }
  tape.clear();
}

}  // namespace glaucad
