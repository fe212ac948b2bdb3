#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mdtaf/errors.hpp"

namespace mdtaf {

// Extents, outermost first. Images are NCHW, token sequences are B x N x C.
using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
};

}  // namespace detail

// Dense row-major tensor with optional gradient tracking.
//
// Tensor is a handle: copies share storage, the way parameters and tape
// entries need to. Use clone() for an independent deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  // Negative axes count from the back.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  std::vector<T> to_vector() const { return impl_->data; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  // Allocates a zero gradient on first use. Callable through const handles:
  // the gradient buffer belongs to the shared storage, not the handle.
  std::span<T> mutable_grad() const;
  void zero_grad() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool is_leaf() const { return impl_->is_leaf; }

  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;
  // Deep copy without gradient or tape history.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

template <typename T>
struct TapeNode {
  std::string op;
  std::vector<Tensor<T>> inputs;
  Tensor<T> output;
  std::function<void()> backward;
};

// Records differentiable operations in creation order while a TapeScope is
// active on the current thread. backward() replays the nodes in reverse.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(TapeNode<T> node);

  // Seeds d(loss)/d(loss) = 1 and accumulates into every reachable tensor.
  // Leaf gradients sum across calls to different tapes; the same tape can be
  // replayed only once until reset().
  void backward(const Tensor<T>& loss);
  void reset();

  std::size_t size() const { return nodes_.size(); }
  const std::vector<TapeNode<T>>& nodes() const { return nodes_; }
  bool consumed() const { return consumed_; }

  static Tape* active();

 private:
  template <typename U>
  friend class TapeScope;

  std::vector<TapeNode<T>> nodes_;
  bool consumed_ = false;
};

template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// When enabled, every op output is scanned and a NumericError is thrown on
// the first NaN/Inf. Thread-local.
void set_nan_check(bool enabled);
bool nan_check_enabled();

class NanCheckGuard {
 public:
  explicit NanCheckGuard(bool enabled = true) : previous_(nan_check_enabled()) {
    set_nan_check(enabled);
  }
  ~NanCheckGuard() { set_nan_check(previous_); }
  NanCheckGuard(const NanCheckGuard&) = delete;
  NanCheckGuard& operator=(const NanCheckGuard&) = delete;

 private:
  bool previous_;
};

// Elementwise cast into another scalar type, detached.
template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& src, bool requires_grad = false) {
  std::vector<To> out(src.data().begin(), src.data().end());
  return Tensor<To>(src.shape(), std::move(out), requires_grad);
}

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;
extern template class TapeScope<float>;
extern template class TapeScope<double>;

}  // namespace mdtaf
