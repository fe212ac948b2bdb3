#pragma once

#include <cstdint>
#include <vector>

#include "mdtaf/tensor.hpp"

// Differentiable tensor operations. Every op records a tape node when a tape
// is active on the calling thread and at least one input requires a gradient.
namespace mdtaf::ops {

// Elementwise arithmetic with right-aligned broadcasting (extents equal or 1).
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, double factor);

// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);

// Reductions to a shape-[1] scalar.
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

// a: [..., M, K], b: [..., K, N]. Leading extents must be equal, or b may be
// rank 2 and shared across the batch.
template <typename T> Tensor<T> matmul_batched(const Tensor<T>& a, const Tensor<T>& b);

// x: [..., Din], w: [Din, Dout], b: [Dout] or undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {});

// Max-subtracted softmax along `axis`.
template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis);

// Normalizes along `axis` (biased variance), then gamma * xhat + beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, int axis, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-6);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
};

std::int64_t conv_output_extent(std::int64_t in, int kernel, int stride, int padding, int dilation);
std::int64_t conv_transpose_output_extent(std::int64_t in, int kernel, int stride, int padding);

// Cross-correlation. x: [B,Cin,H,W], w: [Cout,Cin/groups,Kh,Kw], b: [Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Conv2dOptions opt);

// Adjoint of conv2d. x: [B,Cin,H,W], w: [Cin,Cout,K,K]; H' = (H-1)*stride - 2*padding + K.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int padding);

// [B,C,H,W] -> [B,C,1,1]
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);

// Half-pixel (align_corners = false) bilinear sampling:
//   src = (dst + 0.5) * in / out - 0.5, clamped below at 0; the upper neighbour
//   index is clamped to in - 1.
template <typename T> Tensor<T> bilinear_resize(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w);

// Same element order, new extents. One extent may be -1.
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& dims);
template <typename T> Tensor<T> transpose(const Tensor<T>& x, int a, int b);

// Elements [start, end) along `axis`.
template <typename T> Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t end);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis);

enum class PadMode { kZero, kReflect };

// Pads the last two axes.
template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, std::int64_t top, std::int64_t bottom, std::int64_t left,
                std::int64_t right, PadMode mode);

// Rows of x (axis 0) picked by `index`; output shape [index.size(), ...].
template <typename T>
Tensor<T> index_select(const Tensor<T>& x, const std::vector<std::int64_t>& index);

// Mean binary cross entropy over every element, from logits:
//   max(z, 0) - z y + log(1 + exp(-|z|)).
// Targets must be exactly 0 or 1.
template <typename T> Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets);

}  // namespace mdtaf::ops
