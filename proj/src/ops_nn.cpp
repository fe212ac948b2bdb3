#include <algorithm>
#include <cmath>
#include <vector>

#include "ops_internal.hpp"

namespace mdtaf::ops {

namespace detail {

template <typename T>
void im2col(const T* x, std::int64_t channels, std::int64_t h, std::int64_t w, int kh, int kw,
            int stride, int pad, int dilation, std::int64_t oh, std::int64_t ow, T* col) {
  const std::int64_t plane = oh * ow;
  for (std::int64_t c = 0; c < channels; ++c) {
    const T* xc = x + c * h * w;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * plane;
        for (std::int64_t y = 0; y < oh; ++y) {
          const std::int64_t iy = y * stride - pad + ki * dilation;
          T* dst = row + y * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = xc + iy * w;
          for (std::int64_t x0 = 0; x0 < ow; ++x0) {
            const std::int64_t ix = x0 * stride - pad + kj * dilation;
            dst[x0] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::int64_t channels, std::int64_t h, std::int64_t w, int kh, int kw,
            int stride, int pad, int dilation, std::int64_t oh, std::int64_t ow, T* x) {
  const std::int64_t plane = oh * ow;
  for (std::int64_t c = 0; c < channels; ++c) {
    T* xc = x + c * h * w;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * plane;
        for (std::int64_t y = 0; y < oh; ++y) {
          const std::int64_t iy = y * stride - pad + ki * dilation;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + y * ow;
          T* dst = xc + iy * w;
          for (std::int64_t x0 = 0; x0 < ow; ++x0) {
            const std::int64_t ix = x0 * stride - pad + kj * dilation;
            if (ix >= 0 && ix < w) dst[ix] += src[x0];
          }
        }
      }
    }
  }
}

#define MDTAF_INST(T)                                                                            \
  template void im2col<T>(const T*, std::int64_t, std::int64_t, std::int64_t, int, int, int, int, \
                          int, std::int64_t, std::int64_t, T*);                                  \
  template void col2im<T>(const T*, std::int64_t, std::int64_t, std::int64_t, int, int, int, int, \
                          int, std::int64_t, std::int64_t, T*);
MDTAF_INSTANTIATE_FLOATING(MDTAF_INST)
#undef MDTAF_INST

}  // namespace detail

using detail::check_finite;
using detail::col2im;
using detail::gemm;
using detail::im2col;
using detail::normalize_axis;
using detail::record;
using detail::tracking;

namespace {

// outer x axis x inner decomposition around one axis.
struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t n = 1;
  std::int64_t inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.n = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + " expects a [B,C,H,W] tensor, got " + shape_str(s));
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_at(x.shape(), ax);
  Tensor<T> out(x.shape());
  const T* in = x.data().data();
  T* o = out.mutable_data().data();
  for (std::int64_t a = 0; a < s.outer; ++a) {
    for (std::int64_t c = 0; c < s.inner; ++c) {
      const std::int64_t base = a * s.n * s.inner + c;
      T mx = in[base];
      for (std::int64_t i = 1; i < s.n; ++i) mx = std::max(mx, in[base + i * s.inner]);
      T total = 0;
      for (std::int64_t i = 0; i < s.n; ++i) {
        const T e = std::exp(in[base + i * s.inner] - mx);
        o[base + i * s.inner] = e;
        total += e;
      }
      for (std::int64_t i = 0; i < s.n; ++i) o[base + i * s.inner] /= total;
    }
  }
  if (tracking<T>({&x})) {
    record<T>("softmax", out, {x}, [x, out, s]() mutable {
      const T* g = out.grad().data();
      const T* y = out.data().data();
      T* gx = x.mutable_grad().data();
      for (std::int64_t a = 0; a < s.outer; ++a) {
        for (std::int64_t c = 0; c < s.inner; ++c) {
          const std::int64_t base = a * s.n * s.inner + c;
          T dot = 0;
          for (std::int64_t i = 0; i < s.n; ++i) dot += g[base + i * s.inner] * y[base + i * s.inner];
          for (std::int64_t i = 0; i < s.n; ++i) {
            const std::int64_t k = base + i * s.inner;
            gx[k] += y[k] * (g[k] - dot);
          }
        }
      }
    });
  }
  check_finite("softmax", out);
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, int axis, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps) {
  const int ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_at(x.shape(), ax);
  if (gamma.numel() != s.n || beta.numel() != s.n) {
    throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match normalized extent " + std::to_string(s.n));
  }
  Tensor<T> out(x.shape());
  const T* in = x.data().data();
  const T* gm = gamma.data().data();
  const T* bt = beta.data().data();
  T* o = out.mutable_data().data();
  // Per (outer, inner) statistics, laid out outer-major.
  std::vector<T> mean_v(static_cast<std::size_t>(s.outer * s.inner), T(0));
  std::vector<T> rstd_v(mean_v.size(), T(0));
  const T inv_n = T(1) / static_cast<T>(s.n);
  for (std::int64_t a = 0; a < s.outer; ++a) {
    const T* xa = in + a * s.n * s.inner;
    T* mu = mean_v.data() + a * s.inner;
    T* rs = rstd_v.data() + a * s.inner;
    for (std::int64_t i = 0; i < s.n; ++i) {
      for (std::int64_t c = 0; c < s.inner; ++c) mu[c] += xa[i * s.inner + c];
    }
    for (std::int64_t c = 0; c < s.inner; ++c) mu[c] *= inv_n;
    for (std::int64_t i = 0; i < s.n; ++i) {
      for (std::int64_t c = 0; c < s.inner; ++c) {
        const T d = xa[i * s.inner + c] - mu[c];
        rs[c] += d * d;
      }
    }
    for (std::int64_t c = 0; c < s.inner; ++c) rs[c] = T(1) / std::sqrt(rs[c] * inv_n + static_cast<T>(eps));
    T* oa = o + a * s.n * s.inner;
    for (std::int64_t i = 0; i < s.n; ++i) {
      for (std::int64_t c = 0; c < s.inner; ++c) {
        const std::int64_t k = i * s.inner + c;
        oa[k] = (xa[k] - mu[c]) * rs[c] * gm[i] + bt[i];
      }
    }
  }
  if (tracking<T>({&x, &gamma, &beta})) {
    record<T>("layer_norm", out, {x, gamma, beta},
              [x, gamma, beta, out, s, mean_v = std::move(mean_v), rstd_v = std::move(rstd_v)]() mutable {
                const T* g = out.grad().data();
                const T* in = x.data().data();
                const T* gm = gamma.data().data();
                T* gx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
                T* gg = gamma.requires_grad() ? gamma.mutable_grad().data() : nullptr;
                T* gb = beta.requires_grad() ? beta.mutable_grad().data() : nullptr;
                const T inv_n = T(1) / static_cast<T>(s.n);
                std::vector<T> sum_d(static_cast<std::size_t>(s.inner));
                std::vector<T> sum_dx(static_cast<std::size_t>(s.inner));
                for (std::int64_t a = 0; a < s.outer; ++a) {
                  const std::int64_t off = a * s.n * s.inner;
                  const T* mu = mean_v.data() + a * s.inner;
                  const T* rs = rstd_v.data() + a * s.inner;
                  std::fill(sum_d.begin(), sum_d.end(), T(0));
                  std::fill(sum_dx.begin(), sum_dx.end(), T(0));
                  for (std::int64_t i = 0; i < s.n; ++i) {
                    for (std::int64_t c = 0; c < s.inner; ++c) {
                      const std::int64_t k = off + i * s.inner + c;
                      const T xhat = (in[k] - mu[c]) * rs[c];
                      const T dxhat = g[k] * gm[i];
                      sum_d[c] += dxhat;
                      sum_dx[c] += dxhat * xhat;
                      if (gg) gg[i] += g[k] * xhat;
                      if (gb) gb[i] += g[k];
                    }
                  }
                  if (!gx) continue;
                  for (std::int64_t i = 0; i < s.n; ++i) {
                    for (std::int64_t c = 0; c < s.inner; ++c) {
                      const std::int64_t k = off + i * s.inner + c;
                      const T xhat = (in[k] - mu[c]) * rs[c];
                      const T dxhat = g[k] * gm[i];
                      gx[k] += rs[c] * (dxhat - sum_d[c] * inv_n - xhat * sum_dx[c] * inv_n);
                    }
                  }
                }
              });
  }
  check_finite("layer_norm", out);
  return out;
}

std::int64_t conv_output_extent(std::int64_t in, int kernel, int stride, int padding, int dilation) {
  if (stride <= 0 || dilation <= 0 || kernel <= 0 || padding < 0) {
    throw ConfigError("convolution needs positive kernel/stride/dilation and non-negative padding");
  }
  const std::int64_t span = static_cast<std::int64_t>(dilation) * (kernel - 1) + 1;
  const std::int64_t num = in + 2 * padding - span;
  if (num < 0) {
    throw ConfigError("convolution output extent is non-positive (input " + std::to_string(in) +
                      ", kernel " + std::to_string(kernel) + ", dilation " + std::to_string(dilation) +
                      ", padding " + std::to_string(padding) + ")");
  }
  return num / stride + 1;
}

std::int64_t conv_transpose_output_extent(std::int64_t in, int kernel, int stride, int padding) {
  if (stride <= 0 || kernel <= 0 || padding < 0) {
    throw ConfigError("transposed convolution needs positive kernel/stride and non-negative padding");
  }
  const std::int64_t out = (in - 1) * stride - 2 * static_cast<std::int64_t>(padding) + kernel;
  if (out <= 0) {
    throw ConfigError("transposed convolution output extent is non-positive (" + std::to_string(out) + ")");
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Conv2dOptions opt) {
  require_rank4(x.shape(), "conv2d");
  if (w.rank() != 4) throw ShapeError("conv2d weight must be [Cout,Cin/g,Kh,Kw], got " + shape_str(w.shape()));
  if (opt.groups <= 0) throw ConfigError("conv2d groups must be positive");
  const std::int64_t batch = x.dim(0);
  const std::int64_t cin = x.dim(1);
  const std::int64_t h = x.dim(2);
  const std::int64_t wd = x.dim(3);
  const std::int64_t cout = w.dim(0);
  const int kh = static_cast<int>(w.dim(2));
  const int kw = static_cast<int>(w.dim(3));
  const int g = opt.groups;
  if (cin % g != 0 || cout % g != 0) {
    throw ShapeError("conv2d: channels (" + std::to_string(cin) + " -> " + std::to_string(cout) +
                     ") not divisible by groups " + std::to_string(g));
  }
  if (w.dim(1) != cin / g) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " expects " + std::to_string(w.dim(1) * g) +
                     " input channels, input has " + std::to_string(cin));
  }
  if (b.defined() && b.numel() != cout) {
    throw ShapeError("conv2d: bias " + shape_str(b.shape()) + " does not match Cout " + std::to_string(cout));
  }
  const std::int64_t oh = conv_output_extent(h, kh, opt.stride, opt.padding, opt.dilation);
  const std::int64_t ow = conv_output_extent(wd, kw, opt.stride, opt.padding, opt.dilation);
  const std::int64_t cin_g = cin / g;
  const std::int64_t cout_g = cout / g;
  const std::int64_t plane = oh * ow;
  const std::int64_t ckk = cin_g * kh * kw;

  Tensor<T> out(Shape{batch, cout, oh, ow});
  T* po = out.mutable_data().data();
  const T* px = x.data().data();
  const T* pw = w.data().data();
  std::vector<T> col(static_cast<std::size_t>(ckk * plane));
  for (std::int64_t n = 0; n < batch; ++n) {
    for (int gi = 0; gi < g; ++gi) {
      im2col(px + (n * cin + gi * cin_g) * h * wd, cin_g, h, wd, kh, kw, opt.stride, opt.padding,
             opt.dilation, oh, ow, col.data());
      T* dst = po + (n * cout + gi * cout_g) * plane;
      gemm(false, false, cout_g, plane, ckk, pw + gi * cout_g * ckk, col.data(), dst, false);
    }
    if (b.defined()) {
      const T* pb = b.data().data();
      for (std::int64_t c = 0; c < cout; ++c) {
        T* dst = po + (n * cout + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) dst[i] += pb[c];
      }
    }
  }
  if (tracking<T>({&x, &w, &b})) {
    std::vector<Tensor<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    record<T>("conv2d", out, std::move(inputs),
              [x, w, b, out, opt, batch, cin, h, wd, cout, kh, kw, oh, ow, cin_g, cout_g, plane, ckk]() mutable {
                const int g = opt.groups;
                const T* gout = out.grad().data();
                const T* px = x.data().data();
                const T* pw = w.data().data();
                T* gx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
                T* gw = w.requires_grad() ? w.mutable_grad().data() : nullptr;
                std::vector<T> col(static_cast<std::size_t>(ckk * plane));
                for (std::int64_t n = 0; n < batch; ++n) {
                  for (int gi = 0; gi < g; ++gi) {
                    const T* gslice = gout + (n * cout + gi * cout_g) * plane;
                    if (gw) {
                      im2col(px + (n * cin + gi * cin_g) * h * wd, cin_g, h, wd, kh, kw, opt.stride,
                             opt.padding, opt.dilation, oh, ow, col.data());
                      gemm(false, true, cout_g, ckk, plane, gslice, col.data(), gw + gi * cout_g * ckk, true);
                    }
                    if (gx) {
                      gemm(true, false, ckk, plane, cout_g, pw + gi * cout_g * ckk, gslice, col.data(), false);
                      col2im(col.data(), cin_g, h, wd, kh, kw, opt.stride, opt.padding, opt.dilation, oh, ow,
                             gx + (n * cin + gi * cin_g) * h * wd);
                    }
                  }
                }
                if (b.defined() && b.requires_grad()) {
                  T* gb = b.mutable_grad().data();
                  for (std::int64_t n = 0; n < batch; ++n) {
                    for (std::int64_t c = 0; c < cout; ++c) {
                      const T* src = gout + (n * cout + c) * plane;
                      T acc = 0;
                      for (std::int64_t i = 0; i < plane; ++i) acc += src[i];
                      gb[c] += acc;
                    }
                  }
                }
              });
  }
  check_finite("conv2d", out);
  return out;
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int padding) {
  require_rank4(x.shape(), "conv_transpose2d");
  if (w.rank() != 4) {
    throw ShapeError("conv_transpose2d weight must be [Cin,Cout,Kh,Kw], got " + shape_str(w.shape()));
  }
  const std::int64_t batch = x.dim(0);
  const std::int64_t cin = x.dim(1);
  const std::int64_t h = x.dim(2);
  const std::int64_t wd = x.dim(3);
  if (w.dim(0) != cin) {
    throw ShapeError("conv_transpose2d: weight " + shape_str(w.shape()) + " expects " +
                     std::to_string(w.dim(0)) + " input channels, input has " + std::to_string(cin));
  }
  const std::int64_t cout = w.dim(1);
  const int kh = static_cast<int>(w.dim(2));
  const int kw = static_cast<int>(w.dim(3));
  if (b.defined() && b.numel() != cout) {
    throw ShapeError("conv_transpose2d: bias " + shape_str(b.shape()) + " does not match Cout");
  }
  const std::int64_t oh = conv_transpose_output_extent(h, kh, stride, padding);
  const std::int64_t ow = conv_transpose_output_extent(wd, kw, stride, padding);
  // The input grid is the "column" grid of a conv over the output.
  const std::int64_t plane = h * wd;
  const std::int64_t ckk = cout * kh * kw;
  Tensor<T> out(Shape{batch, cout, oh, ow});
  T* po = out.mutable_data().data();
  const T* px = x.data().data();
  const T* pw = w.data().data();
  std::vector<T> col(static_cast<std::size_t>(ckk * plane));
  for (std::int64_t n = 0; n < batch; ++n) {
    // col[ckk, plane] = W^T[ckk, cin] * x[cin, plane]
    gemm(true, false, ckk, plane, cin, pw, px + n * cin * plane, col.data(), false);
    col2im(col.data(), cout, oh, ow, kh, kw, stride, padding, 1, h, wd, po + n * cout * oh * ow);
    if (b.defined()) {
      const T* pb = b.data().data();
      for (std::int64_t c = 0; c < cout; ++c) {
        T* dst = po + (n * cout + c) * oh * ow;
        for (std::int64_t i = 0; i < oh * ow; ++i) dst[i] += pb[c];
      }
    }
  }
  if (tracking<T>({&x, &w, &b})) {
    std::vector<Tensor<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    record<T>("conv_transpose2d", out, std::move(inputs),
              [x, w, b, out, stride, padding, batch, cin, h, wd, cout, kh, kw, oh, ow, plane, ckk]() mutable {
                const T* gout = out.grad().data();
                const T* px = x.data().data();
                const T* pw = w.data().data();
                T* gx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
                T* gw = w.requires_grad() ? w.mutable_grad().data() : nullptr;
                std::vector<T> col(static_cast<std::size_t>(ckk * plane));
                for (std::int64_t n = 0; n < batch; ++n) {
                  im2col(gout + n * cout * oh * ow, cout, oh, ow, kh, kw, stride, padding, 1, h, wd, col.data());
                  if (gx) gemm(false, false, cin, plane, ckk, pw, col.data(), gx + n * cin * plane, true);
                  if (gw) gemm(false, true, cin, ckk, plane, px + n * cin * plane, col.data(), gw, true);
                }
                if (b.defined() && b.requires_grad()) {
                  T* gb = b.mutable_grad().data();
                  for (std::int64_t n = 0; n < batch; ++n) {
                    for (std::int64_t c = 0; c < cout; ++c) {
                      const T* src = gout + (n * cout + c) * oh * ow;
                      T acc = 0;
                      for (std::int64_t i = 0; i < oh * ow; ++i) acc += src[i];
                      gb[c] += acc;
                    }
                  }
                }
              });
  }
  check_finite("conv_transpose2d", out);
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank4(x.shape(), "global_avg_pool");
  const std::int64_t bc = x.dim(0) * x.dim(1);
  const std::int64_t plane = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), 1, 1});
  const T* in = x.data().data();
  T* o = out.mutable_data().data();
  const T inv = T(1) / static_cast<T>(plane);
  for (std::int64_t i = 0; i < bc; ++i) {
    T acc = 0;
    for (std::int64_t p = 0; p < plane; ++p) acc += in[i * plane + p];
    o[i] = acc * inv;
  }
  if (tracking<T>({&x})) {
    record<T>("global_avg_pool", out, {x}, [x, out, bc, plane, inv]() mutable {
      const T* g = out.grad().data();
      T* gx = x.mutable_grad().data();
      for (std::int64_t i = 0; i < bc; ++i) {
        const T v = g[i] * inv;
        for (std::int64_t p = 0; p < plane; ++p) gx[i * plane + p] += v;
      }
    });
  }
  check_finite("global_avg_pool", out);
  return out;
}

namespace {

struct Taps {
  std::vector<std::int64_t> lo;
  std::vector<std::int64_t> hi;
  std::vector<double> frac;
};

Taps bilinear_taps(std::int64_t in, std::int64_t out) {
  Taps t;
  t.lo.resize(static_cast<std::size_t>(out));
  t.hi.resize(static_cast<std::size_t>(out));
  t.frac.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::int64_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::int64_t hi = std::min(lo + 1, in - 1);
    t.lo[static_cast<std::size_t>(i)] = lo;
    t.hi[static_cast<std::size_t>(i)] = hi;
    t.frac[static_cast<std::size_t>(i)] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  require_rank4(x.shape(), "bilinear_resize");
  if (out_h < 1 || out_w < 1) throw ConfigError("bilinear_resize target extents must be >= 1");
  const std::int64_t bc = x.dim(0) * x.dim(1);
  const std::int64_t h = x.dim(2);
  const std::int64_t w = x.dim(3);
  const Taps ty = bilinear_taps(h, out_h);
  const Taps tx = bilinear_taps(w, out_w);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), out_h, out_w});
  const T* in = x.data().data();
  T* o = out.mutable_data().data();
  for (std::int64_t p = 0; p < bc; ++p) {
    const T* src = in + p * h * w;
    T* dst = o + p * out_h * out_w;
    for (std::int64_t i = 0; i < out_h; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      const T fy = static_cast<T>(ty.frac[ui]);
      const T* r0 = src + ty.lo[ui] * w;
      const T* r1 = src + ty.hi[ui] * w;
      for (std::int64_t j = 0; j < out_w; ++j) {
        const auto uj = static_cast<std::size_t>(j);
        const T fx = static_cast<T>(tx.frac[uj]);
        const T top = (T(1) - fx) * r0[tx.lo[uj]] + fx * r0[tx.hi[uj]];
        const T bot = (T(1) - fx) * r1[tx.lo[uj]] + fx * r1[tx.hi[uj]];
        dst[i * out_w + j] = (T(1) - fy) * top + fy * bot;
      }
    }
  }
  if (tracking<T>({&x})) {
    record<T>("bilinear_resize", out, {x}, [x, out, ty, tx, bc, h, w, out_h, out_w]() mutable {
      const T* g = out.grad().data();
      T* gx = x.mutable_grad().data();
      for (std::int64_t p = 0; p < bc; ++p) {
        const T* gs = g + p * out_h * out_w;
        T* dst = gx + p * h * w;
        for (std::int64_t i = 0; i < out_h; ++i) {
          const auto ui = static_cast<std::size_t>(i);
          const T fy = static_cast<T>(ty.frac[ui]);
          T* r0 = dst + ty.lo[ui] * w;
          T* r1 = dst + ty.hi[ui] * w;
          for (std::int64_t j = 0; j < out_w; ++j) {
            const auto uj = static_cast<std::size_t>(j);
            const T fx = static_cast<T>(tx.frac[uj]);
            const T v = gs[i * out_w + j];
            r0[tx.lo[uj]] += (T(1) - fy) * (T(1) - fx) * v;
            r0[tx.hi[uj]] += (T(1) - fy) * fx * v;
            r1[tx.lo[uj]] += fy * (T(1) - fx) * v;
            r1[tx.hi[uj]] += fy * fx * v;
          }
        }
      }
    });
  }
  check_finite("bilinear_resize", out);
  return out;
}

#define MDTAF_INST(T)                                                                             \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);                                          \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, int, const Tensor<T>&, const Tensor<T>&,    \
                                   double);                                                      \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dOptions); \
  template Tensor<T> conv_transpose2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, \
                                         int);                                                   \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                       \
  template Tensor<T> bilinear_resize<T>(const Tensor<T>&, std::int64_t, std::int64_t);
MDTAF_INSTANTIATE_FLOATING(MDTAF_INST)
#undef MDTAF_INST

}  // namespace mdtaf::ops
