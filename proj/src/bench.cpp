#include "mdtaf/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <random>

#include "mdtaf/attention.hpp"
#include "mdtaf/errors.hpp"
#include "mdtaf/ops.hpp"
#include "mdtaf/param_store.hpp"

namespace mdtaf {

namespace {

using Tf = Tensor<float>;

std::int64_t grid_side(std::int64_t n) {
  auto side = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(n))));
  return side * side == n ? side : 0;
}

// Plain multi-head attention over every token pair, with ESA's q/k/v/proj weights.
Tf dense_attention(const Tf& x, int heads, const ParamStore<float>& p) {
  const auto b = x.dim(0), n = x.dim(1), c = x.dim(2), d = c / heads;
  auto split = [&](const std::string& name) {
    auto t = ops::linear(x, p.get("a." + name + ".weight"), p.get("a." + name + ".bias"));
    return ops::permute(ops::reshape(t, {b, n, heads, d}), {0, 2, 1, 3});
  };
  auto q = split("q");
  auto k = split("k");
  auto v = split("v");
  auto probs = ops::softmax(
      ops::scale(ops::matmul_batched(q, ops::transpose(k, -1, -2)), 1.0 / std::sqrt(static_cast<double>(d))), -1);
  auto o = ops::reshape(ops::permute(ops::matmul_batched(probs, v), {0, 2, 1, 3}), {b, n, c});
  return ops::linear(o, p.get("a.proj.weight"), p.get("a.proj.bias"));
}

double median_ms(const std::function<void()>& fn, int repeats) {
  fn();
  std::vector<double> ms;
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  return ms.size() % 2 ? ms[ms.size() / 2] : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);
}

}  // namespace

std::string to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::kDense: return "dense";
    case AttentionKind::kEsa: return "esa";
    case AttentionKind::kSsa: return "ssa";
    case AttentionKind::kCsa: return "csa";
  }
  return "?";
}

AttentionKind attention_kind_from_string(const std::string& name) {
  for (auto k : {AttentionKind::kDense, AttentionKind::kEsa, AttentionKind::kSsa, AttentionKind::kCsa}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown attention kind '" + name + "' (dense, esa, ssa, csa)");
}

double attention_flops(AttentionKind kind, std::int64_t n_, std::int64_t c_, std::int64_t r_or_w, int heads, int r1) {
  const double n = static_cast<double>(n_), c = static_cast<double>(c_), rw = static_cast<double>(r_or_w);
  const double tail = 2 * n * c * c + 2 * n * c * c / r1 + 2 * n * c / r1 + 18 * n * c;
  switch (kind) {
    case AttentionKind::kDense: return 8 * n * c * c + 4 * n * n * c;
    case AttentionKind::kEsa: return 12 * n * c * c + 4 * n * n * c / rw;
    case AttentionKind::kSsa: return 8 * n * c * c + 4 * n * rw * rw * c + tail;
    case AttentionKind::kCsa: return 8 * n * c * c + 4 * n * c * c / heads + tail;
  }
  return 0.0;
}

void BenchOptions::validate() const {
  if (kinds.empty()) throw ConfigError("bench needs at least one attention kind");
  if (sizes.empty()) throw ConfigError("bench needs at least one size");
  if (repeats < 1) throw ConfigError("bench repeats must be >= 1, got " + std::to_string(repeats));
  if (channels < 1 || heads < 1 || channels % heads != 0) {
    throw ConfigError("bench channels " + std::to_string(channels) + " must be a positive multiple of heads " +
                      std::to_string(heads));
  }
  for (auto n : sizes) {
    if (n < 1 || grid_side(n) == 0) throw ConfigError("bench size N=" + std::to_string(n) + " is not a perfect square");
    for (auto r : reductions) {
      if (r < 1 || n % r != 0) {
        throw ConfigError("bench size N=" + std::to_string(n) + " is not divisible by reduction " + std::to_string(r));
      }
    }
  }
  if (window < 1) throw ConfigError("bench window must be >= 1");
}

std::vector<BenchRow> run_bench(const BenchOptions& options, const BenchRowFn& on_row) {
  options.validate();
  std::vector<BenchRow> rows;
  auto emit = [&](BenchRow row) {
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  };
  const int c = static_cast<int>(options.channels);
  for (auto n : options.sizes) {
    const auto side = grid_side(n);
    Tf x({1, n, c});
    std::mt19937_64 rng(options.seed);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    for (auto& v : x.mutable_data()) v = dist(rng);
    for (auto kind : options.kinds) {
      const int ratio = c % 8 == 0 ? 8 : 1;
      AttentionConfig cfg{.channels = c, .heads = options.heads, .reduction = 1,
                          .window = static_cast<int>(options.window), .r1 = ratio, .r2 = ratio};
      std::vector<std::int64_t> params_r = {0};
      if (kind == AttentionKind::kEsa) params_r = options.reductions;
      for (auto r : params_r) {
        ParamLayout layout;
        BenchRow row{to_string(kind), n, c, 0, 0.0, 0.0};
        std::function<void()> fn;
        ParamStore<float> p;
        switch (kind) {
          case AttentionKind::kDense:
            declare_esa_params(layout, "a", cfg);
            p = init_params(layout, options.seed + 1);
            row.r_or_w = 1;
            fn = [&] { dense_attention(x, options.heads, p); };
            break;
          case AttentionKind::kEsa:
            cfg.reduction = static_cast<int>(r);
            declare_esa_params(layout, "a", cfg);
            p = init_params(layout, options.seed + 1);
            row.r_or_w = r;
            fn = [&] { esa_branch(x, cfg, p, "a"); };
            break;
          case AttentionKind::kSsa:
            declare_ssa_params(layout, "a", cfg);
            p = init_params(layout, options.seed + 1);
            row.r_or_w = effective_window(side, side, options.window);
            fn = [&] { ssa_branch(x, side, side, cfg, p, "a"); };
            break;
          case AttentionKind::kCsa:
            declare_csa_params(layout, "a", cfg);
            p = init_params(layout, options.seed + 1);
            fn = [&] { csa_branch(x, side, side, cfg, p, "a"); };
            break;
        }
        row.flops_estimate = attention_flops(kind, n, c, row.r_or_w, cfg.heads, cfg.r1);
        row.wall_ms = median_ms(fn, options.repeats);
        emit(row);
      }
    }
  }
  return rows;
}

void write_bench_row(std::ostream& os, const BenchRow& row) {
  os << row.kind << ',' << row.n << ',' << row.c << ',' << row.r_or_w << ',' << std::setprecision(6)
     << row.flops_estimate << ',' << std::fixed << std::setprecision(3) << row.wall_ms << std::defaultfloat << '\n';
}

}  // namespace mdtaf
