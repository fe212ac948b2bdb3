#include <algorithm>
#include <cmath>

#include "ops_internal.hpp"

namespace mdtaf::ops {
namespace {

using detail::check_finite;
using detail::record;
using detail::tracking;

// Per-output-dimension strides into each operand; 0 marks a broadcast axis.
struct Broadcast {
  Shape out;
  std::vector<std::int64_t> stride_a;
  std::vector<std::int64_t> stride_b;
  bool same = false;
};

std::vector<std::int64_t> aligned_strides(const Shape& in, std::size_t rank) {
  std::vector<std::int64_t> strides(rank, 0);
  std::int64_t s = 1;
  const std::size_t offset = rank - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[offset + i] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  return strides;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  p.out.assign(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t ea = i + a.size() >= rank ? a[i + a.size() - rank] : 1;
    const std::int64_t eb = i + b.size() >= rank ? b[i + b.size() - rank] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    p.out[i] = std::max(ea, eb);
  }
  p.stride_a = aligned_strides(a, rank);
  p.stride_b = aligned_strides(b, rank);
  return p;
}

// Calls fn(out_index, a_index, b_index) in row-major output order.
template <typename Fn>
void for_each_broadcast(const Broadcast& p, Fn&& fn) {
  const std::int64_t total = shape_numel(p.out);
  if (p.same) {
    for (std::int64_t i = 0; i < total; ++i) fn(i, i, i);
    return;
  }
  const std::size_t rank = p.out.size();
  std::vector<std::int64_t> counter(rank, 0);
  std::int64_t ia = 0;
  std::int64_t ib = 0;
  const std::int64_t inner = p.out[rank - 1];
  const std::int64_t sa = p.stride_a[rank - 1];
  const std::int64_t sb = p.stride_b[rank - 1];
  for (std::int64_t i = 0; i < total; i += inner) {
    for (std::int64_t j = 0; j < inner; ++j) fn(i + j, ia + j * sa, ib + j * sb);
    // advance every axis except the innermost
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++counter[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (counter[d] < p.out[d]) break;
      ia -= p.stride_a[d] * p.out[d];
      ib -= p.stride_b[d] * p.out[d];
      counter[d] = 0;
    }
  }
}

enum class Binary { kAdd, kSub, kMul, kDiv };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Binary kind, const char* name) {
  const Broadcast plan = plan_broadcast(a.shape(), b.shape(), name);
  Tensor<T> out(plan.out);
  auto o = out.mutable_data();
  const auto x = a.data();
  const auto y = b.data();
  switch (kind) {
    case Binary::kAdd:
      for_each_broadcast(plan, [&](auto i, auto ia, auto ib) { o[i] = x[ia] + y[ib]; });
      break;
    case Binary::kSub:
      for_each_broadcast(plan, [&](auto i, auto ia, auto ib) { o[i] = x[ia] - y[ib]; });
      break;
    case Binary::kMul:
      for_each_broadcast(plan, [&](auto i, auto ia, auto ib) { o[i] = x[ia] * y[ib]; });
      break;
    case Binary::kDiv:
      for_each_broadcast(plan, [&](auto i, auto ia, auto ib) { o[i] = x[ia] / y[ib]; });
      break;
  }
  if (tracking<T>({&a, &b})) {
    record<T>(name, out, {a, b}, [a, b, out, plan, kind]() mutable {
      const auto g = out.grad();
      const auto x = a.data();
      const auto y = b.data();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        switch (kind) {
          case Binary::kAdd:
          case Binary::kSub:
            for_each_broadcast(plan, [&](auto i, auto ia, auto) { ga[ia] += g[i]; });
            break;
          case Binary::kMul:
            for_each_broadcast(plan, [&](auto i, auto ia, auto ib) { ga[ia] += g[i] * y[ib]; });
            break;
          case Binary::kDiv:
            for_each_broadcast(plan, [&](auto i, auto ia, auto ib) { ga[ia] += g[i] / y[ib]; });
            break;
        }
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        switch (kind) {
          case Binary::kAdd:
            for_each_broadcast(plan, [&](auto i, auto, auto ib) { gb[ib] += g[i]; });
            break;
          case Binary::kSub:
            for_each_broadcast(plan, [&](auto i, auto, auto ib) { gb[ib] -= g[i]; });
            break;
          case Binary::kMul:
            for_each_broadcast(plan, [&](auto i, auto ia, auto ib) { gb[ib] += g[i] * x[ia]; });
            break;
          case Binary::kDiv:
            for_each_broadcast(plan, [&](auto i, auto ia, auto ib) {
              gb[ib] -= g[i] * x[ia] / (y[ib] * y[ib]);
            });
            break;
        }
      }
    });
  }
  check_finite(name, out);
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kAdd, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kSub, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kMul, "mul");
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kDiv, "div");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  const T f = static_cast<T>(factor);
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  const auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] * f;
  if (tracking<T>({&x})) {
    record<T>("scale", out, {x}, [x, out, f]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * f;
    });
  }
  check_finite("scale", out);
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  // sqrt(2 / pi)
  constexpr double kC = 0.7978845608028654;
  constexpr double kA = 0.044715;
  const T c = static_cast<T>(kC);
  const T a = static_cast<T>(kA);
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  const auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const T v = in[i];
    o[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v)));
  }
  if (tracking<T>({&x})) {
    record<T>("gelu", out, {x}, [x, out, a, c]() mutable {
      const auto g = out.grad();
      const auto in = x.data();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = in[i];
        const T t = std::tanh(c * (v + a * v * v * v));
        const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * a * v * v);
        gx[i] += g[i] * d;
      }
    });
  }
  check_finite("gelu", out);
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  const auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const T v = in[i];
    if (v >= T(0)) {
      o[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      o[i] = e / (T(1) + e);
    }
  }
  if (tracking<T>({&x})) {
    record<T>("sigmoid", out, {x}, [x, out]() mutable {
      const auto g = out.grad();
      const auto y = out.data();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  }
  check_finite("sigmoid", out);
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  detail::CompensatedSum<T> acc;
  for (auto v : x.data()) acc.add(v);
  Tensor<T> out = Tensor<T>::scalar(acc.value());
  if (tracking<T>({&x})) {
    record<T>("sum", out, {x}, [x, out]() mutable {
      const T g = out.grad()[0];
      for (auto& v : x.mutable_grad()) v += g;
    });
  }
  check_finite("sum", out);
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  detail::CompensatedSum<T> acc;
  for (auto v : x.data()) acc.add(v);
  const T n = static_cast<T>(x.numel());
  Tensor<T> out = Tensor<T>::scalar(acc.value() / n);
  if (tracking<T>({&x})) {
    record<T>("mean", out, {x}, [x, out, n]() mutable {
      const T g = out.grad()[0] / n;
      for (auto& v : x.mutable_grad()) v += g;
    });
  }
  check_finite("mean", out);
  return out;
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape()) {
    throw ShapeError("bce_with_logits: logits " + shape_str(logits.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  }
  const auto z = logits.data();
  const auto y = targets.data();
  detail::CompensatedSum<T> acc;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (y[i] != T(0) && y[i] != T(1)) {
      throw ShapeError("bce_with_logits: target values must be 0 or 1, found " + std::to_string(y[i]));
    }
    const T v = z[i];
    acc.add(std::max(v, T(0)) - v * y[i] + std::log1p(std::exp(-std::abs(v))));
  }
  const T n = static_cast<T>(z.size());
  Tensor<T> out = Tensor<T>::scalar(acc.value() / n);
  if (tracking<T>({&logits})) {
    record<T>("bce_with_logits", out, {logits, targets}, [logits, targets, out, n]() mutable {
      const T g = out.grad()[0] / n;
      const auto z = logits.data();
      const auto y = targets.data();
      auto gz = logits.mutable_grad();
      for (std::size_t i = 0; i < z.size(); ++i) {
        const T v = z[i];
        const T p = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
        gz[i] += g * (p - y[i]);
      }
    });
  }
  check_finite("bce_with_logits", out);
  return out;
}

#define MDTAF_INST(T)                                                       \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> scale<T>(const Tensor<T>&, double);                   \
  template Tensor<T> gelu<T>(const Tensor<T>&);                            \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                         \
  template Tensor<T> sum<T>(const Tensor<T>&);                             \
  template Tensor<T> mean<T>(const Tensor<T>&);                            \
  template Tensor<T> bce_with_logits<T>(const Tensor<T>&, const Tensor<T>&);
MDTAF_INSTANTIATE_FLOATING(MDTAF_INST)
#undef MDTAF_INST

}  // namespace mdtaf::ops
