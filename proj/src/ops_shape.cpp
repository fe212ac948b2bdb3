#include <algorithm>
#include <numeric>
#include <vector>

#include "ops_internal.hpp"

namespace mdtaf::ops {

using detail::check_finite;
using detail::normalize_axis;
using detail::record;
using detail::tracking;

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred extent");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known <= 0 || x.numel() % known != 0) {
      throw ShapeError("reshape: cannot infer extent of " + shape_str(shape) + " from " + shape_str(x.shape()));
    }
    shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  }
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  Tensor<T> out(shape, x.to_vector());
  if (tracking<T>({&x})) {
    record<T>("reshape", out, {x}, [x, out]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

namespace {

std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Source offset for every output element of a permutation, row-major.
std::vector<std::int64_t> permutation_map(const Shape& in, const std::vector<int>& dims) {
  const auto in_strides = row_major_strides(in);
  const std::size_t rank = in.size();
  Shape out(rank);
  std::vector<std::int64_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out[i] = in[static_cast<std::size_t>(dims[i])];
    src_stride[i] = in_strides[static_cast<std::size_t>(dims[i])];
  }
  const std::int64_t total = shape_numel(in);
  std::vector<std::int64_t> map(static_cast<std::size_t>(total));
  std::vector<std::int64_t> counter(rank, 0);
  std::int64_t src = 0;
  for (std::int64_t i = 0; i < total; ++i) {
    map[static_cast<std::size_t>(i)] = src;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      src += src_stride[d];
      if (counter[d] < out[d]) break;
      src -= src_stride[d] * out[d];
      counter[d] = 0;
    }
  }
  return map;
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& dims) {
  const int rank = x.rank();
  if (static_cast<int>(dims.size()) != rank) throw ShapeError("permute: wrong number of axes");
  std::vector<int> seen(static_cast<std::size_t>(rank), 0);
  std::vector<int> norm(dims.size());
  for (std::size_t i = 0; i < dims.size(); ++i) {
    norm[i] = normalize_axis(dims[i], rank);
    if (seen[static_cast<std::size_t>(norm[i])]++) throw ShapeError("permute: repeated axis");
  }
  Shape out_shape(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) out_shape[static_cast<std::size_t>(i)] = x.dim(norm[static_cast<std::size_t>(i)]);
  auto map = std::make_shared<std::vector<std::int64_t>>(permutation_map(x.shape(), norm));
  Tensor<T> out(out_shape);
  auto o = out.mutable_data();
  const auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[static_cast<std::size_t>((*map)[i])];
  if (tracking<T>({&x})) {
    record<T>("permute", out, {x}, [x, out, map]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[static_cast<std::size_t>((*map)[i])] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int a, int b) {
  std::vector<int> dims(static_cast<std::size_t>(x.rank()));
  std::iota(dims.begin(), dims.end(), 0);
  std::swap(dims[static_cast<std::size_t>(normalize_axis(a, x.rank()))],
            dims[static_cast<std::size_t>(normalize_axis(b, x.rank()))]);
  return permute(x, dims);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t end) {
  const int ax = normalize_axis(axis, x.rank());
  const std::int64_t extent = x.dim(ax);
  if (start < 0 || end > extent || start >= end) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(end) + ") out of range for axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::int64_t outer = 1;
  for (int i = 0; i < ax; ++i) outer *= x.dim(i);
  std::int64_t inner = 1;
  for (int i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(ax)] = end - start;
  const std::int64_t len = (end - start) * inner;
  Tensor<T> out(out_shape);
  const T* in = x.data().data();
  T* o = out.mutable_data().data();
  for (std::int64_t a = 0; a < outer; ++a) {
    std::copy(in + (a * extent + start) * inner, in + (a * extent + start) * inner + len, o + a * len);
  }
  if (tracking<T>({&x})) {
    record<T>("slice", out, {x}, [x, out, outer, extent, start, inner, len]() mutable {
      const T* g = out.grad().data();
      T* gx = x.mutable_grad().data();
      for (std::int64_t a = 0; a < outer; ++a) {
        T* dst = gx + (a * extent + start) * inner;
        const T* src = g + a * len;
        for (std::int64_t i = 0; i < len; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of an empty list");
  const int rank = xs.front().rank();
  const int ax = normalize_axis(axis, rank);
  Shape out_shape = xs.front().shape();
  out_shape[static_cast<std::size_t>(ax)] = 0;
  for (const auto& t : xs) {
    Shape probe = t.shape();
    if (t.rank() != rank) throw ShapeError("concat: rank mismatch");
    probe[static_cast<std::size_t>(ax)] = 0;
    Shape ref = xs.front().shape();
    ref[static_cast<std::size_t>(ax)] = 0;
    if (probe != ref) {
      throw ShapeError("concat: " + shape_str(t.shape()) + " incompatible with " + shape_str(xs.front().shape()));
    }
    out_shape[static_cast<std::size_t>(ax)] += t.dim(ax);
  }
  std::int64_t outer = 1;
  for (int i = 0; i < ax; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
  std::int64_t inner = 1;
  for (int i = ax + 1; i < rank; ++i) inner *= out_shape[static_cast<std::size_t>(i)];
  const std::int64_t out_len = out_shape[static_cast<std::size_t>(ax)] * inner;
  Tensor<T> out(out_shape);
  T* o = out.mutable_data().data();
  std::int64_t offset = 0;
  std::vector<std::int64_t> offsets;
  bool any_grad = false;
  for (const auto& t : xs) {
    offsets.push_back(offset);
    const std::int64_t len = t.dim(ax) * inner;
    const T* in = t.data().data();
    for (std::int64_t a = 0; a < outer; ++a) std::copy(in + a * len, in + (a + 1) * len, o + a * out_len + offset);
    offset += len;
    any_grad = any_grad || t.requires_grad();
  }
  if (any_grad && Tape<T>::active() != nullptr) {
    record<T>("concat", out, xs, [xs, out, offsets, outer, inner, out_len, ax]() mutable {
      const T* g = out.grad().data();
      for (std::size_t k = 0; k < xs.size(); ++k) {
        if (!xs[k].requires_grad()) continue;
        const std::int64_t len = xs[k].dim(ax) * inner;
        T* gx = xs[k].mutable_grad().data();
        for (std::int64_t a = 0; a < outer; ++a) {
          const T* src = g + a * out_len + offsets[k];
          for (std::int64_t i = 0; i < len; ++i) gx[a * len + i] += src[i];
        }
      }
    });
  }
  return out;
}

namespace {

// Source index along one padded axis, or -1 for a zero pad.
std::vector<std::int64_t> pad_map(std::int64_t in, std::int64_t before, std::int64_t after, PadMode mode) {
  std::vector<std::int64_t> map(static_cast<std::size_t>(in + before + after));
  for (std::int64_t i = 0; i < in + before + after; ++i) {
    std::int64_t s = i - before;
    if (s < 0 || s >= in) {
      if (mode == PadMode::kZero) {
        s = -1;
      } else {
        if (s < 0) s = -s;
        if (s >= in) s = 2 * (in - 1) - s;
      }
    }
    map[static_cast<std::size_t>(i)] = s;
  }
  return map;
}

}  // namespace

template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, std::int64_t top, std::int64_t bottom, std::int64_t left,
                std::int64_t right, PadMode mode) {
  if (x.rank() < 2) throw ShapeError("pad2d needs rank >= 2");
  if (top < 0 || bottom < 0 || left < 0 || right < 0) throw ConfigError("pad2d amounts must be non-negative");
  const std::int64_t h = x.dim(-2);
  const std::int64_t w = x.dim(-1);
  if (mode == PadMode::kReflect && (top >= h || bottom >= h || left >= w || right >= w)) {
    throw ConfigError("reflect padding must be smaller than the padded extent");
  }
  const auto my = pad_map(h, top, bottom, mode);
  const auto mx = pad_map(w, left, right, mode);
  const std::int64_t oh = h + top + bottom;
  const std::int64_t ow = w + left + right;
  const std::int64_t planes = x.numel() / (h * w);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = oh;
  out_shape[out_shape.size() - 1] = ow;
  Tensor<T> out(out_shape);
  const T* in = x.data().data();
  T* o = out.mutable_data().data();
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t i = 0; i < oh; ++i) {
      const std::int64_t sy = my[static_cast<std::size_t>(i)];
      if (sy < 0) continue;
      for (std::int64_t j = 0; j < ow; ++j) {
        const std::int64_t sx = mx[static_cast<std::size_t>(j)];
        if (sx < 0) continue;
        o[(p * oh + i) * ow + j] = in[(p * h + sy) * w + sx];
      }
    }
  }
  if (tracking<T>({&x})) {
    record<T>("pad2d", out, {x}, [x, out, my, mx, planes, h, w, oh, ow]() mutable {
      const T* g = out.grad().data();
      T* gx = x.mutable_grad().data();
      for (std::int64_t p = 0; p < planes; ++p) {
        for (std::int64_t i = 0; i < oh; ++i) {
          const std::int64_t sy = my[static_cast<std::size_t>(i)];
          if (sy < 0) continue;
          for (std::int64_t j = 0; j < ow; ++j) {
            const std::int64_t sx = mx[static_cast<std::size_t>(j)];
            if (sx < 0) continue;
            gx[(p * h + sy) * w + sx] += g[(p * oh + i) * ow + j];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& x, const std::vector<std::int64_t>& index) {
  if (x.rank() < 1) throw ShapeError("index_select needs rank >= 1");
  const std::int64_t rows = x.dim(0);
  const std::int64_t row_len = x.numel() / rows;
  for (auto i : index) {
    if (i < 0 || i >= rows) throw ShapeError("index_select: index " + std::to_string(i) + " out of range");
  }
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<std::int64_t>(index.size());
  Tensor<T> out(out_shape);
  const T* in = x.data().data();
  T* o = out.mutable_data().data();
  for (std::size_t r = 0; r < index.size(); ++r) {
    std::copy(in + index[r] * row_len, in + (index[r] + 1) * row_len, o + static_cast<std::int64_t>(r) * row_len);
  }
  if (tracking<T>({&x})) {
    record<T>("index_select", out, {x}, [x, out, index, row_len]() mutable {
      const T* g = out.grad().data();
      T* gx = x.mutable_grad().data();
      for (std::size_t r = 0; r < index.size(); ++r) {
        const T* src = g + static_cast<std::int64_t>(r) * row_len;
        T* dst = gx + index[r] * row_len;
        for (std::int64_t i = 0; i < row_len; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

#define MDTAF_INST(T)                                                                                 \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                            \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int>&);                          \
  template Tensor<T> transpose<T>(const Tensor<T>&, int, int);                                       \
  template Tensor<T> slice<T>(const Tensor<T>&, int, std::int64_t, std::int64_t);                    \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                                  \
  template Tensor<T> pad2d<T>(const Tensor<T>&, std::int64_t, std::int64_t, std::int64_t, std::int64_t, \
                              PadMode);                                                              \
  template Tensor<T> index_select<T>(const Tensor<T>&, const std::vector<std::int64_t>&);
MDTAF_INSTANTIATE_FLOATING(MDTAF_INST)
#undef MDTAF_INST

}  // namespace mdtaf::ops
