#include "mdtaf/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace mdtaf {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  for (auto e : shape) {
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

thread_local bool t_nan_check = false;

template <typename T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

}  // namespace

void set_nan_check(bool enabled) { t_nan_check = enabled; }
bool nan_check_enabled() { return t_nan_check; }

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad) {
  validate_shape(shape);
  impl_ = std::make_shared<detail::TensorImpl<T>>();
  impl_->data.assign(static_cast<std::size_t>(shape_numel(shape)), T(0));
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl<T>>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() const {
  impl_->grad.clear();
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
  if (static_cast<int>(index.size()) != rank()) {
    throw ShapeError("index rank does not match tensor rank");
  }
  std::int64_t flat = 0;
  std::size_t d = 0;
  for (auto i : index) {
    const auto extent = impl_->shape[d++];
    if (i < 0 || i >= extent) throw ShapeError("index out of range");
    flat = flat * extent + i;
  }
  return impl_->data[static_cast<std::size_t>(flat)];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(impl_->shape, impl_->data, false);
}

template <typename T>
void Tape<T>::record(TapeNode<T> node) {
  if (consumed_) {
    throw ContractError("recording '" + node.op + "' on a tape that was already replayed; call reset()");
  }
  nodes_.push_back(std::move(node));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (consumed_) throw ContractError("backward called twice on the same tape without reset()");
  if (!loss.requires_grad()) throw ContractError("loss does not depend on any tracked tensor");
  consumed_ = true;

  Tensor<T> seed = loss;
  seed.mutable_grad()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // not reachable from the loss
    it->backward();
  }
}

template <typename T>
void Tape<T>::reset() {
  nodes_.clear();
  consumed_ = false;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_tape<T>();
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(active_tape<T>()) {
  active_tape<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  active_tape<T>() = previous_;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;

}  // namespace mdtaf
