#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mdtaf/ops.hpp"
#include "mdtaf/tensor.hpp"

namespace mdtaf::ops::detail {

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void check_finite(const char* op, const Tensor<T>& out) {
  if (!nan_check_enabled()) return;
  for (auto v : out.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op + " with output shape " +
                         shape_str(out.shape()));
    }
  }
}

// Marks `out` as a tape product and records its backward closure.
template <typename T>
void record(const char* op, Tensor<T>& out, std::vector<Tensor<T>> inputs, std::function<void()> backward) {
  out.impl()->requires_grad = true;
  out.impl()->is_leaf = false;
  Tape<T>::active()->record(TapeNode<T>{op, std::move(inputs), out, std::move(backward)});
}

// Neumaier-compensated running sum. Scalar reductions (losses in particular)
// feed finite-difference checks, where naive accumulation error over a few
// thousand terms would swamp small gradients.
template <typename T>
class CompensatedSum {
 public:
  void add(T v) {
    const T t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v)) {
      comp_ += (sum_ - t) + v;
    } else {
      comp_ += (v - t) + sum_;
    }
    sum_ = t;
  }
  T value() const { return sum_ + comp_; }

 private:
  T sum_ = 0;
  T comp_ = 0;
};

inline int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return a;
}

// C (+)= op(A) op(B), row-major. op(A) is M x K, op(B) is K x N.
// Loop orders keep the innermost loop contiguous and the summation order fixed.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a,
          const T* b, T* c, bool accumulate);

// Column buffer for a single image/group: rows (c, kh, kw), columns (oh, ow).
template <typename T>
void im2col(const T* x, std::int64_t channels, std::int64_t h, std::int64_t w, int kh, int kw,
            int stride, int pad, int dilation, std::int64_t oh, std::int64_t ow, T* col);

// Adjoint of im2col: accumulates the column buffer back into x.
template <typename T>
void col2im(const T* col, std::int64_t channels, std::int64_t h, std::int64_t w, int kh, int kw,
            int stride, int pad, int dilation, std::int64_t oh, std::int64_t ow, T* x);

}  // namespace mdtaf::ops::detail

#define MDTAF_INSTANTIATE_FLOATING(MACRO) \
  MACRO(float)                            \
  MACRO(double)
