#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace unihetero {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Raised when operand shapes do not conform; names the op and both shapes.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : std::invalid_argument(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b)) {}
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// Cache-line aligned storage. Vectorized kernels peel loops according to
/// the buffer address, so a fixed alignment keeps rounding independent of
/// where the heap happens to place a tensor.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

template <class T>
struct TensorNode {
  Shape shape;
  AlignedVector<T> data;
  AlignedVector<T> grad;  // empty unless requires_grad
  bool requires_grad = false;
};

/// Handle to a dense row-major array that can take part in reverse-mode
/// differentiation. Copies share storage.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<TensorNode<T>>()) {
    check_extents(shape);
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<TensorNode<T>>()) {
    check_extents(shape);
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("Tensor: " + std::to_string(values.size()) + " values for shape " +
                       shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data.assign(values.begin(), values.end());
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  /// Extent of the last axis.
  std::size_t cols() const { return node_->shape.back(); }
  /// Product of all leading extents.
  std::size_t rows() const { return numel() / cols(); }

  // A Tensor is a handle: const-ness of the handle does not freeze the
  // shared storage (same as std::shared_ptr).
  std::span<T> data() const { return node_->data; }
  std::span<T> grad() const { return node_->grad; }
  T* ptr() const { return node_->data.data(); }
  T* grad_ptr() const { return node_->grad.data(); }
  T& operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor is not scalar " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }

  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) {
      node_->grad.assign(node_->data.size(), T(0));
    } else {
      node_->grad.clear();
      node_->grad.shrink_to_fit();
    }
  }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  /// Deep copy of the values; the copy is detached from any graph.
  Tensor clone() const {
    Tensor out;
    out.node_ = std::make_shared<TensorNode<T>>();
    out.node_->shape = node_->shape;
    out.node_->data = node_->data;
    return out;
  }

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }
  bool same_storage(const Tensor& o) const { return node_ == o.node_; }

 private:
  static void check_extents(const Shape& shape) {
    if (shape.empty()) throw ShapeError("Tensor: empty shape");
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("Tensor: zero extent in " + shape_str(shape));
    }
  }

  std::shared_ptr<TensorNode<T>> node_;
};

/// Ordered record of backward closures. Recording order is a topological
/// order of the graph, so replaying it in reverse visits every node after
/// all of its consumers.
template <class T>
class Tape {
 public:
  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }
  std::size_t size() const { return ops_.size(); }
  bool empty() const { return ops_.empty(); }
  void clear() { ops_.clear(); }

  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (ops_.empty()) throw std::logic_error("backward: tape is empty");
    if (!loss.has_grad()) throw std::logic_error("backward: loss does not require grad");
    loss.grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

 private:
  std::vector<std::function<void()>> ops_;
};

template <class T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

/// Installs a fresh tape for the current thread for the scope's lifetime.
/// Without an active scope, ops run forward-only and record nothing.
template <class T>
class TapeScope {
 public:
  TapeScope() : previous_(active_tape<T>()) { active_tape<T>() = &tape_; }
  ~TapeScope() { active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape<T>& tape() { return tape_; }

 private:
  Tape<T> tape_;
  Tape<T>* previous_;
};

/// Suspends recording for the current thread (evaluation, EMA targets).
template <class T>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape<T>()) { active_tape<T>() = nullptr; }
  ~NoGradScope() { active_tape<T>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <class T>
void backward(Tensor<T>& loss) {
  Tape<T>* tape = active_tape<T>();
  if (!tape) throw std::logic_error("backward: no active tape");
  tape->backward(loss);
}

template <class T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
using ParameterList = std::vector<NamedParameter<T>>;

template <class T>
void zero_grads(ParameterList<T>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace unihetero
