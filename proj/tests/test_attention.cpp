#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "mdtaf/attention.hpp"
#include "mdtaf/gradcheck.hpp"
#include "mdtaf/ops.hpp"
#include "mdtaf/patch_embed.hpp"
#include "test_util.hpp"

using namespace mdtaf;
using mdtaf::testing::bit_equal;
using mdtaf::testing::max_abs_diff;
using mdtaf::testing::max_rel_diff;
using mdtaf::testing::random_store;
using mdtaf::testing::random_tensor;
using mdtaf::testing::weighted_mean;
using mdtaf::testing::weighted_sum;
using mdtaf::testing::zero_store;
using Td = Tensor<double>;

namespace {

// ---- scalar reference implementations -------------------------------------

using Mat = std::vector<double>;  // row-major

// rows x din times w [din, dout] (+ b)
Mat affine(const Mat& x, std::int64_t rows, std::int64_t din, const Td& w, const Td* b) {
  const std::int64_t dout = w.dim(1);
  Mat y(static_cast<std::size_t>(rows * dout), 0.0);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t o = 0; o < dout; ++o) {
      double acc = b ? b->data()[o] : 0.0;
      for (std::int64_t i = 0; i < din; ++i) acc += x[r * din + i] * w.data()[i * dout + o];
      y[r * dout + o] = acc;
    }
  }
  return y;
}

// Multi-head softmax(q k^T * scale + bias(head, i, j)) v, heads concatenated.
template <typename Bias>
Mat attend(const Mat& q, const Mat& k, const Mat& v, std::int64_t n, std::int64_t m, std::int64_t c, int heads,
           double scale, Bias bias) {
  const std::int64_t d = c / heads;
  Mat out(static_cast<std::size_t>(n * c), 0.0);
  for (int h = 0; h < heads; ++h) {
    for (std::int64_t i = 0; i < n; ++i) {
      std::vector<double> s(static_cast<std::size_t>(m));
      for (std::int64_t j = 0; j < m; ++j) {
        double dot = 0;
        for (std::int64_t e = 0; e < d; ++e) dot += q[i * c + h * d + e] * k[j * c + h * d + e];
        s[j] = dot * scale + bias(h, i, j);
      }
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::int64_t j = 0; j < m; ++j) {
        for (std::int64_t e = 0; e < d; ++e) out[i * c + h * d + e] += s[j] / z * v[j * c + h * d + e];
      }
    }
  }
  return out;
}

Mat rows_of(const Td& t) { return t.to_vector(); }

Td as_tensor(const Mat& m, Shape shape) { return Td(std::move(shape), m); }

double gelu_ref(double v) {
  return 0.5 * v * (1.0 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
}

double sigmoid_ref(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

// ---- fixtures ----------------------------------------------------------------

AttentionConfig small_cfg(int reduction = 1, int window = 4) {
  return {.channels = 8, .heads = 2, .reduction = reduction, .window = window, .r1 = 4, .r2 = 4};
}

template <typename Declare>
ParamLayout layout_of(Declare declare) {
  ParamLayout layout;
  declare(layout);
  return layout;
}

void fill(ParamStore<double>& store, const std::string& name, double v) {
  for (auto& x : store.get(name).mutable_data()) x = v;
}

// Entries k/8 for small integers k: sums and products of a few of these stay exact.
Td dyadic_tensor(Shape shape, std::uint64_t seed) {
  auto t = random_tensor(shape, seed, -4.0, 4.0);
  for (auto& v : t.mutable_data()) v = std::round(v) / 8.0;
  return t;
}

void check_rows_sum_to_one(const Td& probs) {
  const auto m = probs.dim(-1);
  const auto rows = probs.numel() / m;
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::int64_t j = 0; j < m; ++j) s += probs.data()[r * m + j];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

}  // namespace

TEST_CASE("configuration validation") {
  CHECK_NOTHROW(small_cfg().validate());
  CHECK_THROWS_AS((AttentionConfig{.channels = 10, .heads = 4}).validate(), ConfigError);
  CHECK_THROWS_AS((AttentionConfig{.channels = 12, .heads = 2, .r1 = 8}).validate(), ConfigError);
  CHECK_THROWS_AS((AttentionConfig{.channels = 16, .heads = 2, .r2 = 3}).validate(), ConfigError);
  CHECK_THROWS_AS((AttentionConfig{.channels = 8, .heads = 0}).validate(), ConfigError);

  auto cfg = small_cfg(3);
  auto params = random_store(layout_of([&](ParamLayout& l) { declare_esa_params(l, "esa", cfg); }), 1);
  CHECK_THROWS_AS(efficient_self_attention(Td({1, 16, 8}), cfg, params, "esa"), ConfigError);
  CHECK_THROWS_AS(efficient_self_attention(Td({1, 15, 4}), cfg, params, "esa"), ShapeError);
}

TEST_CASE("ESA matches a dense attention oracle") {
  const std::int64_t n = 16, c = 8;
  for (int r : {1, 2, 4}) {
    CAPTURE(r);
    auto cfg = small_cfg(r);
    auto params = random_store(layout_of([&](ParamLayout& l) { declare_esa_params(l, "esa", cfg); }), 2 + r);
    if (r == 1) {
      // Identity reduction: plain multi-head attention.
      for (const char* name : {"esa.k_reduce", "esa.v_reduce"}) {
        auto& w = params.get(std::string(name) + ".weight");
        std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0);
        for (std::int64_t i = 0; i < c; ++i) w.mutable_data()[i * c + i] = 1.0;
        fill(params, std::string(name) + ".bias", 0.0);
      }
    }
    auto x = random_tensor({1, n, c}, 10 + r);
    AttentionTrace<double> trace;
    auto y = efficient_self_attention(x, cfg, params, "esa", &trace);

    auto p = [&](const std::string& s) { return params.get("esa." + s); };
    const Mat xm = rows_of(x);
    auto q = affine(xm, n, c, p("q.weight"), &params.get("esa.q.bias"));
    // Consecutive groups of r token rows concatenate into one reduced row.
    auto k = affine(affine(xm, n, c, p("k.weight"), &params.get("esa.k.bias")), n / r, c * r, p("k_reduce.weight"),
                    &params.get("esa.k_reduce.bias"));
    auto v = affine(affine(xm, n, c, p("v.weight"), &params.get("esa.v.bias")), n / r, c * r, p("v_reduce.weight"),
                    &params.get("esa.v_reduce.bias"));
    auto o = attend(q, k, v, n, n / r, c, 2, 1.0 / std::sqrt(4.0), [](int, std::int64_t, std::int64_t) { return 0.0; });
    auto ref = affine(o, n, c, p("proj.weight"), &params.get("esa.proj.bias"));
    for (std::int64_t i = 0; i < n * c; ++i) ref[i] += xm[i];

    CHECK(max_rel_diff(y, as_tensor(ref, {1, n, c})) < 1e-6);
    CHECK(trace.esa_probs.shape() == Shape{1, 2, n, n / r});
    check_rows_sum_to_one(trace.esa_probs);
  }
}

TEST_CASE("ESA reduction shapes for N=64, R=4, C=8") {
  auto cfg = small_cfg(4);
  auto layout = layout_of([&](ParamLayout& l) { declare_esa_params(l, "esa", cfg); });
  auto params = random_store(layout, 5);
  // K reshapes to 16 x (C*R) = 16 x 32 and maps back to 16 x 8.
  CHECK(params.get("esa.k_reduce.weight").shape() == Shape{32, 8});
  CHECK(params.get("esa.v_reduce.weight").shape() == Shape{32, 8});
  AttentionTrace<double> trace;
  auto y = efficient_self_attention(random_tensor({2, 64, 8}, 6), cfg, params, "esa", &trace);
  CHECK(y.shape() == Shape{2, 64, 8});
  CHECK(trace.esa_probs.shape() == Shape{2, 2, 64, 16});
}

TEST_CASE("ESA with zero projections is the residual") {
  auto cfg = small_cfg(2);
  auto params = zero_store(layout_of([&](ParamLayout& l) { declare_esa_params(l, "esa", cfg); }));
  auto x = random_tensor({2, 16, 8}, 7);
  CHECK(bit_equal(efficient_self_attention(x, cfg, params, "esa"), x));
}

TEST_CASE("window partition layout and round trip") {
  // 4x4 grid, one channel holding the flat position.
  Td x({1, 4, 4, 1});
  std::iota(x.mutable_data().begin(), x.mutable_data().end(), 0.0);
  auto w = window_partition(x, 2);
  REQUIRE(w.shape() == Shape{4, 4, 1});
  const std::vector<double> expect = {0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
  CHECK(w.to_vector() == expect);

  auto single = window_partition(x, 4);
  CHECK(single.shape() == Shape{1, 16, 1});
  CHECK(bit_equal(ops::reshape(single, {16}), ops::reshape(x, {16})));

  auto big = random_tensor({3, 8, 12, 5}, 8);
  for (std::int64_t ws : {1, 2, 4}) CHECK(bit_equal(window_merge(window_partition(big, ws), 3, 8, 12, ws), big));
  CHECK_THROWS_AS(window_partition(big, 3), ContractError);
  CHECK_THROWS_AS(window_partition(big, 5), ContractError);
}

TEST_CASE("effective window") {
  CHECK(effective_window(64, 64, 8) == 8);
  CHECK(effective_window(4, 4, 8) == 4);
  CHECK(effective_window(6, 6, 4) == 3);
  CHECK(effective_window(12, 8, 8) == 4);
  CHECK(effective_window(1, 1, 8) == 1);
  CHECK(effective_window(7, 5, 8) == 1);
}

TEST_CASE("depthwise_local examples") {
  auto layout = layout_of([](ParamLayout& l) { declare_depthwise_params(l, "dw", 3); });
  auto params = zero_store(layout);
  for (std::int64_t c = 0; c < 3; ++c) params.get("dw.weight").mutable_data()[c * 9 + 4] = 1.0;
  auto f = random_tensor({2, 3, 5, 6}, 9);
  auto y = depthwise_local(f, params, "dw");
  CHECK(bit_equal(y, ops::gelu(f)));

  fill(params, "dw.weight", 1.0);
  const double c = 0.25;
  auto flat = depthwise_local(Td::full({1, 3, 5, 5}, c), params, "dw");
  for (std::int64_t ch = 0; ch < 3; ++ch) {
    for (std::int64_t i = 1; i < 4; ++i) {
      for (std::int64_t j = 1; j < 4; ++j) CHECK(flat.at({0, ch, i, j}) == gelu_ref(9 * c));
    }
  }
  CHECK(flat.at({0, 0, 0, 0}) == gelu_ref(4 * c));

  auto rparams = random_store(layout, 10);
  auto x = random_tensor({1, 3, 4, 5}, 11);
  std::vector<Td> inputs = rparams.tensors();
  inputs.push_back(x);
  auto r = grad_check([&](const std::vector<Td>&) { return weighted_sum(depthwise_local(x, rparams, "dw"), 12); },
                      inputs);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("interaction gates") {
  const int c = 8;
  auto sl = layout_of([&](ParamLayout& l) { declare_spatial_gate_params(l, "gs", c, 4); });
  auto cl = layout_of([&](ParamLayout& l) { declare_channel_gate_params(l, "gc", c, 2); });
  auto x1 = random_tensor({2, c, 3, 4}, 13);
  auto x2 = random_tensor({2, c, 3, 4}, 14);

  SUBCASE("saturated gates") {
    auto sp = zero_store(sl);
    auto ch = zero_store(cl);
    fill(sp, "gs.fc2.bias", 40.0);
    fill(ch, "gc.fc2.bias", 40.0);
    CHECK(bit_equal(interact_spatial(x1, x2, sp, "gs"), x1));
    CHECK(bit_equal(interact_channel(x1, x2, ch, "gc"), x1));
    fill(sp, "gs.fc2.bias", -40.0);
    fill(ch, "gc.fc2.bias", -40.0);
    auto s = interact_spatial(x1, x2, sp, "gs");
    auto k = interact_channel(x1, x2, ch, "gc");
    for (auto v : s.data()) CHECK(std::abs(v) < 1e-15);
    for (auto v : k.data()) CHECK(std::abs(v) < 1e-15);
  }

  SUBCASE("spatial gate against a scalar loop") {
    auto sp = random_store(sl, 15);
    auto y = interact_spatial(x1, x2, sp, "gs");
    const auto& w1 = sp.get("gs.fc1.weight");
    const auto& b1 = sp.get("gs.fc1.bias");
    const auto& w2 = sp.get("gs.fc2.weight");
    const auto& b2 = sp.get("gs.fc2.bias");
    for (std::int64_t b = 0; b < 2; ++b) {
      for (std::int64_t i = 0; i < 3; ++i) {
        for (std::int64_t j = 0; j < 4; ++j) {
          double pre = 0;
          for (std::int64_t h = 0; h < 2; ++h) {
            double a = 0;
            for (std::int64_t k = 0; k < c; ++k) a += w1.data()[h * c + k] * x2.at({b, k, i, j});
            pre += w2.data()[h] * gelu_ref(a + b1.data()[h]);
          }
          const double g = sigmoid_ref(pre + b2.data()[0]);
          for (std::int64_t k = 0; k < c; ++k) CHECK(y.at({b, k, i, j}) == x1.at({b, k, i, j}) * g);
        }
      }
    }
  }

  SUBCASE("channel gate against a scalar loop") {
    auto ch = random_store(cl, 16);
    auto y = interact_channel(x1, x2, ch, "gc");
    const auto& w1 = ch.get("gc.fc1.weight");
    const auto& b1 = ch.get("gc.fc1.bias");
    const auto& w2 = ch.get("gc.fc2.weight");
    const auto& b2 = ch.get("gc.fc2.bias");
    for (std::int64_t b = 0; b < 2; ++b) {
      std::vector<double> gap(c), hidden(4);
      for (std::int64_t k = 0; k < c; ++k) {
        double s = 0;
        for (std::int64_t p = 0; p < 12; ++p) s += x2.data()[(b * c + k) * 12 + p];
        gap[k] = s * (1.0 / 12.0);
      }
      for (std::int64_t h = 0; h < 4; ++h) {
        double a = 0;
        for (std::int64_t k = 0; k < c; ++k) a += w1.data()[h * c + k] * gap[k];
        hidden[h] = gelu_ref(a + b1.data()[h]);
      }
      for (std::int64_t k = 0; k < c; ++k) {
        double a = 0;
        for (std::int64_t h = 0; h < 4; ++h) a += w2.data()[k * 4 + h] * hidden[h];
        const double g = sigmoid_ref(a + b2.data()[k]);
        for (std::int64_t p = 0; p < 12; ++p) {
          CHECK(y.data()[(b * c + k) * 12 + p] == x1.data()[(b * c + k) * 12 + p] * g);
        }
      }
    }
  }

  SUBCASE("channel gate ignores pixel order") {
    auto ch = random_store(cl, 17);
    auto d2 = dyadic_tensor({1, c, 3, 4}, 18);
    // Reverse the pixel order of every channel.
    Td shuffled(d2.shape());
    for (std::int64_t k = 0; k < c; ++k) {
      for (std::int64_t p = 0; p < 12; ++p) shuffled.mutable_data()[k * 12 + p] = d2.data()[k * 12 + 11 - p];
    }
    auto ones = Td::full({1, c, 3, 4}, 1.0);
    CHECK(bit_equal(interact_channel(ones, d2, ch, "gc"), interact_channel(ones, shuffled, ch, "gc")));
  }

  CHECK_THROWS_AS(interact_spatial(x1, Td({2, c, 3, 5}), zero_store(sl), "gs"), ShapeError);
}

TEST_CASE("SSA single window matches dense attention") {
  auto cfg = small_cfg(1, 4);
  auto params = random_store(layout_of([&](ParamLayout& l) { declare_ssa_params(l, "ssa", cfg); }), 19);
  fill(params, "ssa.rel_pos_bias", 0.0);
  auto x = random_tensor({1, 16, 8}, 20);
  AttentionTrace<double> trace;
  auto y = spatial_self_attention(x, 4, 4, cfg, params, "ssa", &trace);
  CHECK(y.shape() == Shape{1, 16, 8});

  const Mat xm = rows_of(x);
  auto q = affine(xm, 16, 8, params.get("ssa.q.weight"), nullptr);
  auto k = affine(xm, 16, 8, params.get("ssa.k.weight"), nullptr);
  auto v = affine(xm, 16, 8, params.get("ssa.v.weight"), nullptr);
  auto o = attend(q, k, v, 16, 16, 8, 2, 0.5, [](int, std::int64_t, std::int64_t) { return 0.0; });
  auto ref = affine(o, 16, 8, params.get("ssa.attn_merge.weight"), &params.get("ssa.attn_merge.bias"));
  CHECK(max_rel_diff(trace.y_sp, as_tensor(ref, {1, 16, 8})) < 1e-6);
  check_rows_sum_to_one(trace.ssa_probs);
}

TEST_CASE("SSA relative position bias lookup") {
  // With zero queries and keys the scores are the bias table alone.
  auto cfg = small_cfg(1, 3);
  auto params = zero_store(layout_of([&](ParamLayout& l) { declare_ssa_params(l, "ssa", cfg); }));
  auto& table = params.get("ssa.rel_pos_bias");
  REQUIRE(table.shape() == Shape{25, 2});
  auto rnd = random_tensor({25, 2}, 21);
  std::copy(rnd.data().begin(), rnd.data().end(), table.mutable_data().begin());
  AttentionTrace<double> trace;
  spatial_self_attention(random_tensor({1, 9, 8}, 22), 3, 3, cfg, params, "ssa", &trace);
  REQUIRE(trace.ssa_probs.shape() == Shape{1, 2, 9, 9});
  for (int h = 0; h < 2; ++h) {
    for (std::int64_t i = 0; i < 9; ++i) {
      std::vector<double> s(9);
      for (std::int64_t j = 0; j < 9; ++j) {
        const std::int64_t dy = i / 3 - j / 3 + 2, dx = i % 3 - j % 3 + 2;
        s[j] = std::exp(table.at({dy * 5 + dx, h}));
      }
      const double z = std::accumulate(s.begin(), s.end(), 0.0);
      for (std::int64_t j = 0; j < 9; ++j) CHECK(trace.ssa_probs.at({0, h, i, j}) == doctest::Approx(s[j] / z));
    }
  }
}

TEST_CASE("SSA attention path is window local") {
  auto cfg = small_cfg(1, 4);
  auto params = random_store(layout_of([&](ParamLayout& l) { declare_ssa_params(l, "ssa", cfg); }), 23);
  auto x = random_tensor({1, 64, 8}, 24);
  AttentionTrace<double> a, b;
  spatial_self_attention(x, 8, 8, cfg, params, "ssa", &a);
  auto bumped = x.clone();
  // Pixel (1, 2) lives in the top-left 4x4 window.
  for (std::int64_t ch = 0; ch < 8; ++ch) bumped.mutable_data()[(1 * 8 + 2) * 8 + ch] += 0.5;
  spatial_self_attention(bumped, 8, 8, cfg, params, "ssa", &b);
  for (std::int64_t i = 0; i < 8; ++i) {
    for (std::int64_t j = 0; j < 8; ++j) {
      const bool inside = i < 4 && j < 4;
      bool same = true;
      for (std::int64_t ch = 0; ch < 8; ++ch) {
        same = same && a.y_sp.at({0, i * 8 + j, ch}) == b.y_sp.at({0, i * 8 + j, ch});
      }
      CHECK(same != inside);
    }
  }
}

TEST_CASE("SSA falls back to a dividing window") {
  auto cfg = small_cfg(1, 4);
  auto params = random_store(layout_of([&](ParamLayout& l) { declare_ssa_params(l, "ssa", cfg); }), 25);
  AttentionTrace<double> trace;
  auto y = spatial_self_attention(random_tensor({1, 36, 8}, 26), 6, 6, cfg, params, "ssa", &trace);
  CHECK(y.shape() == Shape{1, 36, 8});
  CHECK(trace.ssa_probs.shape() == Shape{4, 2, 9, 9});
  CHECK_THROWS_AS(spatial_self_attention(Td({1, 36, 8}), 4, 8, cfg, params, "ssa"), ShapeError);
}

TEST_CASE("CSA matches a scalar-loop oracle") {
  const std::int64_t n = 8, c = 4;
  AttentionConfig cfg{.channels = 4, .heads = 1, .reduction = 1, .window = 2, .r1 = 2, .r2 = 2};
  auto params = random_store(layout_of([&](ParamLayout& l) { declare_csa_params(l, "csa", cfg); }), 27);
  auto x = random_tensor({1, n, c}, 28);
  AttentionTrace<double> trace;
  auto y = channel_self_attention(x, 2, 4, cfg, params, "csa", &trace);
  CHECK(y.shape() == Shape{1, n, c});

  const Mat xm = rows_of(x);
  auto q = affine(xm, n, c, params.get("csa.q.weight"), nullptr);
  auto k = affine(xm, n, c, params.get("csa.k.weight"), nullptr);
  auto v = affine(xm, n, c, params.get("csa.v.weight"), nullptr);
  const double alpha = params.get("csa.alpha").item();
  // A[a][b] = softmax_b(sum_t q[t][a] k[t][b] / alpha); Y[t][b] = sum_a v[t][a] A[a][b]
  Mat attn(static_cast<std::size_t>(c * c));
  for (std::int64_t a = 0; a < c; ++a) {
    std::vector<double> s(static_cast<std::size_t>(c));
    for (std::int64_t b = 0; b < c; ++b) {
      double dot = 0;
      for (std::int64_t t = 0; t < n; ++t) dot += q[t * c + a] * k[t * c + b];
      s[b] = dot / alpha;
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0;
    for (auto& e : s) z += (e = std::exp(e - mx));
    for (std::int64_t b = 0; b < c; ++b) attn[a * c + b] = s[b] / z;
  }
  Mat o(static_cast<std::size_t>(n * c), 0.0);
  for (std::int64_t t = 0; t < n; ++t) {
    for (std::int64_t b = 0; b < c; ++b) {
      for (std::int64_t a = 0; a < c; ++a) o[t * c + b] += v[t * c + a] * attn[a * c + b];
    }
  }
  auto ref = affine(o, n, c, params.get("csa.attn_merge.weight"), &params.get("csa.attn_merge.bias"));
  CHECK(max_rel_diff(trace.y_ch, as_tensor(ref, {1, n, c})) < 1e-6);
  check_rows_sum_to_one(trace.csa_probs);
}

TEST_CASE("CSA attention path is equivariant to token order") {
  auto cfg = small_cfg();
  auto params = random_store(layout_of([&](ParamLayout& l) { declare_csa_params(l, "csa", cfg); }), 29);
  std::uint64_t seed = 30;
  for (const char* name : {"csa.q.weight", "csa.k.weight", "csa.v.weight"}) {
    auto d = dyadic_tensor({8, 8}, seed++);
    std::copy(d.data().begin(), d.data().end(), params.get(name).mutable_data().begin());
  }
  // Dyadic inputs keep every token sum exact, so reordering cannot round differently.
  auto x = dyadic_tensor({1, 16, 8}, 40);
  std::vector<std::int64_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.begin() + 11);
  std::rotate(perm.begin(), perm.begin() + 5, perm.end());
  Td xp = ops::reshape(ops::index_select(ops::reshape(x, {16, 8}), perm), {1, 16, 8});

  AttentionTrace<double> a, b;
  channel_self_attention(x, 4, 4, cfg, params, "csa", &a);
  channel_self_attention(xp, 4, 4, cfg, params, "csa", &b);
  auto expect = ops::reshape(ops::index_select(ops::reshape(a.y_ch, {16, 8}), perm), {1, 16, 8});
  CHECK(bit_equal(b.y_ch, expect));
}

TEST_CASE("zero projections collapse SSA and CSA to the residual") {
  auto cfg = small_cfg(1, 2);
  auto ssa = zero_store(layout_of([&](ParamLayout& l) { declare_ssa_params(l, "ssa", cfg); }));
  auto csa = zero_store(layout_of([&](ParamLayout& l) { declare_csa_params(l, "csa", cfg); }));
  fill(csa, "csa.alpha", 1.0);
  auto x = random_tensor({2, 16, 8}, 32);
  CHECK(bit_equal(spatial_self_attention(x, 4, 4, cfg, ssa, "ssa"), x));
  CHECK(bit_equal(channel_self_attention(x, 4, 4, cfg, csa, "csa"), x));
}

TEST_CASE("temperature clamp") {
  auto cfg = small_cfg();
  auto params = random_store(layout_of([&](ParamLayout& l) { declare_csa_params(l, "csa", cfg); }), 33);
  params.get("csa.alpha").mutable_data()[0] = -3.0;
  params.get("csa.alpha").mutable_data()[1] = 2.0;
  const double before = params.get("csa.q.weight").data()[0];
  clamp_temperatures(params);
  CHECK(params.get("csa.alpha").data()[0] == kAlphaFloor);
  CHECK(params.get("csa.alpha").data()[1] == 2.0);
  CHECK(params.get("csa.q.weight").data()[0] == before);
}

TEST_CASE("block fusion weights") {
  BlockConfig cfg{.attn = small_cfg(2, 2)};
  CHECK(cfg.lambda1 == 0.6);
  CHECK(cfg.lambda2 == 0.4);
  auto layout = layout_of([&](ParamLayout& l) { declare_block_params(l, "blk", cfg); });
  auto params = zero_store(layout);
  fill(params, "blk.csa.alpha", 1.0);

  // Signed powers of two: the weighted branch sum is exact.
  auto x = random_tensor({1, 16, 8}, 34);
  for (auto& v : x.mutable_data()) v = std::copysign(std::exp2(std::round(v * 4)), v);

  AttentionTrace<double> trace;
  auto y = mdt_block(x, 4, 4, cfg, params, "blk", &trace);
  CHECK(bit_equal(trace.z, ops::scale(x, 2.0)));
  CHECK(bit_equal(y, trace.z));  // zero MLP

  // Block reduces to MLP(norm(2x)) + 2x.
  auto mlp = random_store(layout, 35);
  for (const auto& name : params.names()) {
    if (name.rfind("blk.mlp.", 0) == 0 || name.rfind("blk.norm2.", 0) == 0) {
      std::copy(mlp.get(name).data().begin(), mlp.get(name).data().end(), params.get(name).mutable_data().begin());
    }
  }
  auto z = ops::scale(x, 2.0);
  auto m = ops::layer_norm(z, -1, params.get("blk.norm2.weight"), params.get("blk.norm2.bias"));
  m = ops::linear(m, params.get("blk.mlp.fc1.weight"), params.get("blk.mlp.fc1.bias"));
  m = ops::linear(ops::gelu(m), params.get("blk.mlp.fc2.weight"), params.get("blk.mlp.fc2.bias"));
  CHECK(bit_equal(mdt_block(x, 4, 4, cfg, params, "blk"), ops::add(m, z)));

  BlockConfig bare = cfg;
  bare.skip_mlp_residual = true;
  CHECK(bit_equal(mdt_block(x, 4, 4, bare, params, "blk"), m));
}

TEST_CASE("msa off is a plain ESA transformer block") {
  BlockConfig cfg{.attn = small_cfg(2, 2), .msa = false};
  auto layout = layout_of([&](ParamLayout& l) { declare_block_params(l, "blk", cfg); });
  auto params = random_store(layout, 36);
  CHECK_FALSE(params.contains("blk.ssa.q.weight"));
  auto x = random_tensor({2, 16, 8}, 37);

  auto xn = ops::layer_norm(x, -1, params.get("blk.norm1.weight"), params.get("blk.norm1.bias"));
  auto esa_only = ops::add(esa_branch(xn, cfg.attn, params, "blk.esa"), x);
  auto m = ops::layer_norm(esa_only, -1, params.get("blk.norm2.weight"), params.get("blk.norm2.bias"));
  m = ops::linear(m, params.get("blk.mlp.fc1.weight"), params.get("blk.mlp.fc1.bias"));
  m = ops::linear(ops::gelu(m), params.get("blk.mlp.fc2.weight"), params.get("blk.mlp.fc2.bias"));
  CHECK(bit_equal(mdt_block(x, 4, 4, cfg, params, "blk"), ops::add(m, esa_only)));
}

TEST_CASE("every sub-operation preserves B x N x C") {
  BlockConfig cfg{.attn = small_cfg(4, 4)};
  auto params = random_store(layout_of([&](ParamLayout& l) { declare_block_params(l, "blk", cfg); }), 38);
  auto x = random_tensor({3, 64, 8}, 39);
  CHECK(efficient_self_attention(x, cfg.attn, params, "blk.esa").shape() == x.shape());
  CHECK(spatial_self_attention(x, 8, 8, cfg.attn, params, "blk.ssa").shape() == x.shape());
  CHECK(channel_self_attention(x, 8, 8, cfg.attn, params, "blk.csa").shape() == x.shape());
  CHECK(mdt_block(x, 8, 8, cfg, params, "blk").shape() == x.shape());
}

TEST_CASE("full block gradients") {
  BlockConfig cfg{.attn = small_cfg(2, 2)};
  auto params = random_store(layout_of([&](ParamLayout& l) { declare_block_params(l, "blk", cfg); }), 40);
  auto x = random_tensor({1, 16, 8}, 41);
  auto loss = [&] { return weighted_mean(mdt_block(x, 4, 4, cfg, params, "blk"), 42); };
  CHECK(testing::shift_invariant_grad(params, loss) < 1e-12);
  auto r = grad_check([&](const std::vector<Td>&) { return loss(); }, testing::checkable_inputs(params, {x}),
                      {.max_coords_per_input = 6, .seed = 43});
  INFO("worst input ", r.worst_input, " analytic ", r.worst_analytic, " numeric ", r.worst_numeric);
  CHECK(r.max_rel_error < 1e-3);
}
