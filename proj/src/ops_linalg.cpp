#include <algorithm>
#include <vector>

#include "ops_internal.hpp"

namespace mdtaf::ops {

namespace detail {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  if (trans_b) {
    // Materialize B^T so the inner loop runs over contiguous columns.
    std::vector<T> bt(static_cast<std::size_t>(k * n));
    for (std::int64_t j = 0; j < n; ++j) {
      for (std::int64_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    }
    gemm(trans_a, false, m, n, k, a, bt.data(), c, true);
    return;
  }
  if (!trans_a) {
    for (std::int64_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      const T* arow = a + i * k;
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* brow = b + p * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
    return;
  }
  // A stored K x M.
  for (std::int64_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template void gemm<float>(bool, bool, std::int64_t, std::int64_t, std::int64_t, const float*,
                          const float*, float*, bool);
template void gemm<double>(bool, bool, std::int64_t, std::int64_t, std::int64_t, const double*,
                           const double*, double*, bool);

}  // namespace detail

using detail::check_finite;
using detail::gemm;
using detail::record;
using detail::tracking;

template <typename T>
Tensor<T> matmul_batched(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul_batched needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(-2);
  const std::int64_t k = a.dim(-1);
  const std::int64_t n = b.dim(-1);
  if (b.dim(-2) != k) {
    throw ShapeError("matmul_batched inner extents differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  const bool shared_b = lead_b.empty();
  if (!shared_b && lead_a != lead_b) {
    throw ShapeError("matmul_batched leading extents differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::int64_t batch = shape_numel(lead_a);
  Shape out_shape = lead_a;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  {
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* pc = out.mutable_data().data();
    for (std::int64_t i = 0; i < batch; ++i) {
      gemm(false, false, m, n, k, pa + i * m * k, pb + (shared_b ? 0 : i * k * n), pc + i * m * n, false);
    }
  }
  if (tracking<T>({&a, &b})) {
    record<T>("matmul_batched", out, {a, b}, [a, b, out, m, n, k, batch, shared_b]() mutable {
      const T* g = out.grad().data();
      const T* pa = a.data().data();
      const T* pb = b.data().data();
      if (a.requires_grad()) {
        T* ga = a.mutable_grad().data();
        for (std::int64_t i = 0; i < batch; ++i) {
          gemm(false, true, m, k, n, g + i * m * n, pb + (shared_b ? 0 : i * k * n), ga + i * m * k, true);
        }
      }
      if (b.requires_grad()) {
        T* gb = b.mutable_grad().data();
        for (std::int64_t i = 0; i < batch; ++i) {
          gemm(true, false, k, n, m, pa + i * m * k, g + i * m * n, gb + (shared_b ? 0 : i * k * n), true);
        }
      }
    });
  }
  check_finite("matmul_batched", out);
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.rank() != 2) throw ShapeError("linear weight must be [Din, Dout], got " + shape_str(w.shape()));
  const std::int64_t din = w.dim(0);
  const std::int64_t dout = w.dim(1);
  if (x.dim(-1) != din) {
    throw ShapeError("linear: input last extent " + std::to_string(x.dim(-1)) + " != Din " +
                     std::to_string(din));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != dout)) {
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " does not match Dout " + std::to_string(dout));
  }
  const std::int64_t rows = x.numel() / din;
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor<T> out(out_shape);
  T* po = out.mutable_data().data();
  if (b.defined()) {
    const T* pb = b.data().data();
    for (std::int64_t r = 0; r < rows; ++r) std::copy(pb, pb + dout, po + r * dout);
  }
  gemm(false, false, rows, dout, din, x.data().data(), w.data().data(), po, true);
  if (tracking<T>({&x, &w, &b})) {
    std::vector<Tensor<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    record<T>("linear", out, std::move(inputs), [x, w, b, out, rows, din, dout]() mutable {
      const T* g = out.grad().data();
      if (x.requires_grad()) {
        gemm(false, true, rows, din, dout, g, w.data().data(), x.mutable_grad().data(), true);
      }
      if (w.requires_grad()) {
        gemm(true, false, din, dout, rows, x.data().data(), g, w.mutable_grad().data(), true);
      }
      if (b.defined() && b.requires_grad()) {
        T* gb = b.mutable_grad().data();
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t j = 0; j < dout; ++j) gb[j] += g[r * dout + j];
        }
      }
    });
  }
  check_finite("linear", out);
  return out;
}

#define MDTAF_INST(T)                                                        \
  template Tensor<T> matmul_batched<T>(const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);
MDTAF_INSTANTIATE_FLOATING(MDTAF_INST)
#undef MDTAF_INST

}  // namespace mdtaf::ops
