#include <cmath>
#include <numbers>

#include "doctest.h"
#include "mdtaf/gradcheck.hpp"
#include "mdtaf/ops.hpp"
#include "test_util.hpp"

using namespace mdtaf;
using mdtaf::testing::bit_equal;
using mdtaf::testing::random_tensor;
using mdtaf::testing::weighted_sum;
using Td = Tensor<double>;

namespace {

double check_unary(const std::function<Td(const Td&)>& op, Shape shape, std::uint64_t seed) {
  auto x = random_tensor(shape, seed);
  return grad_check([&](const std::vector<Td>& in) { return weighted_sum(op(in[0]), seed); }, {x})
      .max_rel_error;
}

}  // namespace

TEST_CASE("conv2d counts overlapping ones") {
  Td x = Td::full({1, 1, 3, 3}, 1.0);
  Td w = Td::full({1, 1, 3, 3}, 1.0);
  Td y = ops::conv2d(x, w, Td{}, {.stride = 1, .padding = 1});
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  CHECK(y.at({0, 0, 1, 1}) == 9.0);
  CHECK(y.at({0, 0, 0, 0}) == 4.0);
  CHECK(y.at({0, 0, 2, 2}) == 4.0);
  CHECK(y.at({0, 0, 0, 1}) == 6.0);
}

TEST_CASE("conv output extents") {
  CHECK(ops::conv_output_extent(512, 7, 4, 3, 1) == 128);
  CHECK(ops::conv_output_extent(7, 3, 1, 0, 2) == 3);
  CHECK(ops::conv_output_extent(128, 3, 2, 1, 1) == 64);
  CHECK_THROWS_AS(ops::conv_output_extent(3, 7, 1, 0, 1), ConfigError);
  CHECK(ops::conv_transpose_output_extent(2, 2, 2, 0) == 4);
  CHECK_THROWS_AS(ops::conv_transpose_output_extent(1, 1, 1, 1), ConfigError);
}

TEST_CASE("conv2d rejects bad shapes") {
  Td x({1, 3, 8, 8});
  CHECK_THROWS_AS(ops::conv2d(x, Td({4, 3, 3, 3}), Td{}, {.groups = 2}), ShapeError);
  CHECK_THROWS_AS(ops::conv2d(x, Td({4, 2, 3, 3}), Td{}, {}), ShapeError);
  CHECK_THROWS_AS(ops::conv2d(x, Td({4, 3, 9, 9}), Td{}, {}), ConfigError);
  CHECK_THROWS_AS(ops::conv2d(Td({3, 8, 8}), Td({4, 3, 3, 3}), Td{}, {}), ShapeError);
}

TEST_CASE("depthwise identity kernels reproduce the input exactly") {
  auto x = random_tensor({2, 5, 6, 7}, 3);
  Td w = Td::full({5, 1, 1, 1}, 1.0);
  Td y = ops::conv2d(x, w, Td({5}), {.groups = 5});
  CHECK(bit_equal(x, y));
}

TEST_CASE("conv2d gradients") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto x = random_tensor({2, 4, 5, 6}, seed);
    auto w = random_tensor({6, 2, 3, 3}, seed + 10);
    auto b = random_tensor({6}, seed + 20);
    auto r = grad_check(
        [&](const std::vector<Td>& in) {
          return weighted_sum(ops::conv2d(in[0], in[1], in[2], {.stride = 2, .padding = 2, .dilation = 2, .groups = 2}),
                              seed);
        },
        {x, w, b});
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("conv_transpose2d shape and delta response") {
  Td x({1, 1, 2, 2});
  x.mutable_data()[3] = 1.0;  // bottom-right input pixel
  Td w = Td::full({1, 1, 2, 2}, 1.0);
  Td y = ops::conv_transpose2d(x, w, Td{}, 2, 0);
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) CHECK(y.at({0, 0, i, j}) == ((i >= 2 && j >= 2) ? 1.0 : 0.0));
  }
}

TEST_CASE("conv_transpose2d gradients") {
  for (std::uint64_t seed : {4u, 5u, 6u}) {
    auto x = random_tensor({1, 2, 4, 4}, seed);
    auto w = random_tensor({2, 3, 4, 4}, seed + 1);
    auto b = random_tensor({3}, seed + 2);
    auto r = grad_check(
        [&](const std::vector<Td>& in) { return weighted_sum(ops::conv_transpose2d(in[0], in[1], in[2], 2, 1), seed); },
        {x, w, b});
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("linear examples") {
  Td x({1, 2}, {1, 2});
  Td eye({2, 2}, {1, 0, 0, 1});
  CHECK(bit_equal(ops::linear(x, eye, Td({2})), x));
  Td y = ops::linear(x, eye, Td({2}, {1, 1}));
  CHECK(y.data()[0] == 2.0);
  CHECK(y.data()[1] == 3.0);
  CHECK_THROWS_AS(ops::linear(x, Td({3, 2}), Td{}), ShapeError);
}

TEST_CASE("linear gradients") {
  for (std::uint64_t seed : {7u, 8u, 9u}) {
    auto x = random_tensor({2, 3, 5}, seed);
    auto w = random_tensor({5, 3}, seed + 1);
    auto b = random_tensor({3}, seed + 2);
    auto r = grad_check([&](const std::vector<Td>& in) { return weighted_sum(ops::linear(in[0], in[1], in[2]), seed); },
                        {x, w, b});
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("matmul_batched examples") {
  Td a({2, 2}, {1, 2, 3, 4});
  Td b({2, 1}, {5, 6});
  Td c = ops::matmul_batched(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.data()[0] == 17.0);
  CHECK(c.data()[1] == 39.0);
  Td eye({2, 2}, {1, 0, 0, 1});
  CHECK(bit_equal(ops::matmul_batched(eye, a), a));
  CHECK_THROWS_AS(ops::matmul_batched(a, Td({3, 1})), ShapeError);
  CHECK_THROWS_AS(ops::matmul_batched(Td({2, 2, 3}), Td({3, 3, 1})), ShapeError);
}

TEST_CASE("matmul_batched associativity") {
  auto a = random_tensor({3, 4, 5}, 11);
  auto b = random_tensor({3, 5, 6}, 12);
  auto c = random_tensor({3, 6, 2}, 13);
  auto left = ops::matmul_batched(ops::matmul_batched(a, b), c);
  auto right = ops::matmul_batched(a, ops::matmul_batched(b, c));
  CHECK(mdtaf::testing::max_rel_diff(left, right) < 1e-12);
}

TEST_CASE("matmul_batched gradients, batched and shared rhs") {
  for (std::uint64_t seed : {14u, 15u, 16u}) {
    auto a = random_tensor({2, 3, 4}, seed);
    auto b = random_tensor({2, 4, 5}, seed + 1);
    auto b2 = random_tensor({4, 5}, seed + 2);
    auto r = grad_check(
        [&](const std::vector<Td>& in) {
          return weighted_sum(ops::add(ops::matmul_batched(in[0], in[1]), ops::matmul_batched(in[0], in[2])), seed);
        },
        {a, b, b2});
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("softmax examples") {
  Td u = Td::full({1, 4}, 0.3);
  const auto su = ops::softmax(u, -1);
  for (auto v : su.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  Td x({2}, {0.0, std::log(2.0)});
  Td y = ops::softmax(x, 0);
  CHECK(std::abs(y.data()[0] - 1.0 / 3.0) < 1e-15);
  CHECK(std::abs(y.data()[1] - 2.0 / 3.0) < 1e-15);

  auto r = random_tensor({3, 5, 4}, 17, -5, 5);
  Td shifted = r.clone();
  for (auto& v : shifted.mutable_data()) v += 1000.0;
  for (int axis : {0, 1, 2}) {
    auto a = ops::softmax(r, axis);
    auto b = ops::softmax(shifted, axis);
    CHECK(mdtaf::testing::max_abs_diff(a, b) < 1e-12);
  }
  auto s = ops::softmax(r, 1);
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 4; ++k) {
      double total = 0;
      for (int j = 0; j < 5; ++j) total += s.at({i, j, k});
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("softmax gradients") {
  for (std::uint64_t seed : {18u, 19u, 20u}) {
    CHECK(check_unary([](const Td& x) { return ops::softmax(x, 1); }, {2, 5, 3}, seed) < 1e-4);
    CHECK(check_unary([](const Td& x) { return ops::softmax(x, -1); }, {4, 6}, seed) < 1e-4);
  }
}

TEST_CASE("gelu and sigmoid") {
  CHECK(ops::gelu(Td::scalar(0.0)).item() == 0.0);
  CHECK(ops::sigmoid(Td::scalar(0.0)).item() == 0.5);
  const double s40 = ops::sigmoid(Td::scalar(40.0)).item();
  CHECK(s40 > 1.0 - 1e-15);
  CHECK(s40 <= 1.0);
  // tanh approximation at x = 1
  const double c = std::sqrt(2.0 / std::numbers::pi);
  CHECK(ops::gelu(Td::scalar(1.0)).item() == 0.5 * (1.0 + std::tanh(c * (1.0 + 0.044715))));
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    CHECK(check_unary([](const Td& x) { return ops::gelu(x); }, {16}, seed) < 1e-4);
    CHECK(check_unary([](const Td& x) { return ops::sigmoid(x); }, {16}, seed) < 1e-4);
  }
}

TEST_CASE("layer_norm examples") {
  Td one = Td::full({2}, 1.0);
  Td zero({2});
  Td c = Td::full({3, 2}, 7.0);
  const auto normed = ops::layer_norm(c, -1, one, zero);
  for (auto v : normed.data()) CHECK(v == 0.0);
  Td x({1, 2}, {1.0, 3.0});
  Td y = ops::layer_norm(x, -1, one, zero);
  CHECK(std::abs(y.data()[0] + 1.0) < 1e-5);
  CHECK(std::abs(y.data()[1] - 1.0) < 1e-5);
  CHECK_THROWS_AS(ops::layer_norm(x, -1, Td({3}), Td({3})), ShapeError);
}

TEST_CASE("layer_norm gradients over inner and channel axes") {
  for (std::uint64_t seed : {24u, 25u, 26u}) {
    auto x = random_tensor({2, 4, 3, 3}, seed);
    auto g = random_tensor({4}, seed + 1, 0.5, 1.5);
    auto b = random_tensor({4}, seed + 2);
    auto r = grad_check(
        [&](const std::vector<Td>& in) { return weighted_sum(ops::layer_norm(in[0], 1, in[1], in[2]), seed); },
        {x, g, b});
    CHECK(r.max_rel_error < 1e-4);
    auto x2 = random_tensor({2, 3, 5}, seed + 3);
    auto g2 = random_tensor({5}, seed + 4, 0.5, 1.5);
    auto b2 = random_tensor({5}, seed + 5);
    auto r2 = grad_check(
        [&](const std::vector<Td>& in) { return weighted_sum(ops::layer_norm(in[0], -1, in[1], in[2]), seed); },
        {x2, g2, b2});
    CHECK(r2.max_rel_error < 1e-4);
  }
}

TEST_CASE("global_avg_pool") {
  CHECK(ops::global_avg_pool(Td::full({1, 2, 3, 3}, 4.5)).data()[1] == 4.5);
  Td x({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(ops::global_avg_pool(x).item() == 2.5);
  auto r = random_tensor({2, 3, 4, 4}, 27);
  auto lhs = ops::global_avg_pool(ops::scale(r, 3.0));
  auto rhs = ops::scale(ops::global_avg_pool(r), 3.0);
  CHECK(mdtaf::testing::max_abs_diff(lhs, rhs) < 1e-14);
  for (std::uint64_t seed : {28u, 29u, 30u}) {
    CHECK(check_unary([](const Td& x) { return ops::global_avg_pool(x); }, {2, 3, 4, 5}, seed) < 1e-4);
  }
}

TEST_CASE("bilinear_resize") {
  auto x = random_tensor({1, 2, 5, 3}, 31);
  CHECK(bit_equal(ops::bilinear_resize(x, 5, 3), x));
  const auto flat = ops::bilinear_resize(Td::full({1, 1, 3, 4}, 2.5), 7, 9);
  for (auto v : flat.data()) CHECK(v == doctest::Approx(2.5));
  const auto single = ops::bilinear_resize(Td::full({1, 1, 1, 1}, -1.25), 2, 2);
  for (auto v : single.data()) CHECK(v == -1.25);
  // Half-pixel convention: 2 -> 4 samples at src = -0.25 (clamped), 0.25, 0.75, 1.25 (upper tap clamped).
  Td row({1, 1, 1, 2}, {0.0, 1.0});
  auto up = ops::bilinear_resize(row, 1, 4);
  CHECK(up.data()[0] == 0.0);
  CHECK(up.data()[1] == 0.25);
  CHECK(up.data()[2] == 0.75);
  CHECK(up.data()[3] == 1.0);
  CHECK_THROWS_AS(ops::bilinear_resize(x, 0, 3), ConfigError);
  for (std::uint64_t seed : {32u, 33u, 34u}) {
    CHECK(check_unary([](const Td& x) { return ops::bilinear_resize(x, 7, 4); }, {1, 2, 3, 5}, seed) < 1e-4);
  }
}

TEST_CASE("shape ops gradients") {
  for (std::uint64_t seed : {35u, 36u, 37u}) {
    CHECK(check_unary([](const Td& x) { return ops::permute(x, {2, 0, 3, 1}); }, {2, 3, 4, 2}, seed) < 1e-4);
    CHECK(check_unary([](const Td& x) { return ops::slice(x, 1, 1, 3); }, {2, 4, 3}, seed) < 1e-4);
    CHECK(check_unary([](const Td& x) { return ops::pad2d(x, 1, 2, 0, 1, ops::PadMode::kReflect); }, {1, 2, 4, 3}, seed) <
          1e-4);
    CHECK(check_unary([](const Td& x) { return ops::pad2d(x, 0, 2, 1, 1, ops::PadMode::kZero); }, {1, 2, 3, 3}, seed) <
          1e-4);
    CHECK(check_unary([](const Td& x) { return ops::index_select(x, {2, 0, 2, 1}); }, {3, 2}, seed) < 1e-4);
    CHECK(check_unary(
              [](const Td& x) {
                return ops::concat<double>({ops::slice(x, 2, 0, 1), x, ops::scale(x, 2.0)}, 2);
              },
              {2, 2, 3}, seed) < 1e-4);
    CHECK(check_unary([](const Td& x) { return ops::div(x, ops::add(ops::mul(x, x), Td::scalar(1.0))); }, {5}, seed) <
          1e-4);
  }
}

TEST_CASE("reflect padding indices") {
  Td x({1, 1, 1, 3}, {1, 2, 3});
  auto y = ops::pad2d(x, 0, 0, 2, 2, ops::PadMode::kReflect);
  const std::vector<double> expect{3, 2, 1, 2, 3, 2, 1};
  CHECK(y.to_vector() == expect);
}

TEST_CASE("broadcast arithmetic") {
  Td a({2, 1, 3}, {1, 2, 3, 4, 5, 6});
  Td b({4, 1}, {10, 20, 30, 40});
  auto c = ops::add(a, b);
  CHECK(c.shape() == Shape{2, 4, 3});
  CHECK(c.at({1, 2, 0}) == 34.0);
  CHECK_THROWS_AS(ops::add(a, Td({2, 2})), ShapeError);
  for (std::uint64_t seed : {38u, 39u, 40u}) {
    auto x = random_tensor({2, 1, 3}, seed);
    auto y = random_tensor({4, 1}, seed + 1, 0.5, 2.0);
    auto r = grad_check(
        [&](const std::vector<Td>& in) {
          return weighted_sum(ops::sub(ops::mul(in[0], in[1]), ops::div(in[0], in[1])), seed);
        },
        {x, y});
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("backward examples and contract errors") {
  Td x = random_tensor({2, 3}, 41);
  x.set_requires_grad(true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = ops::sum(x);
    tape.backward(loss);
    for (auto g : x.grad()) CHECK(g == 1.0);
    CHECK_THROWS_AS(tape.backward(loss), ContractError);
    tape.reset();
    x.zero_grad();
    CHECK_THROWS_AS(tape.backward(ops::mul(x, x)), ContractError);
  }
  Td v({2}, {1.0, 2.0}, true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(ops::sum(ops::mul(v, v)));
  }
  CHECK(v.grad()[0] == 2.0);
  CHECK(v.grad()[1] == 4.0);
}

TEST_CASE("gradients sum over multiple consumers") {
  Td v({2}, {1.5, -2.0}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = ops::add(ops::scale(v, 3.0), ops::mul(v, v));
  tape.backward(ops::sum(y));
  CHECK(v.grad()[0] == 3.0 + 3.0);
  CHECK(v.grad()[1] == 3.0 - 4.0);
  // Every node reached once, in creation order.
  CHECK(tape.size() == 4);
}

TEST_CASE("no tape means no graph") {
  Td v({2}, {1.0, 2.0}, true);
  auto y = ops::mul(v, v);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.is_leaf());
}

TEST_CASE("grad_check oracle examples") {
  auto x = random_tensor({3, 4}, 42);
  auto r = grad_check([](const std::vector<Td>& in) { return ops::sum(in[0]); }, {x});
  CHECK(r.max_rel_error < 1e-10);
  CHECK(r.coords_checked == 12);
  auto r2 = grad_check([](const std::vector<Td>& in) { return ops::sum(ops::sigmoid(in[0])); }, {x});
  CHECK(r2.max_rel_error < 1e-6);
  CHECK_THROWS_AS(grad_check([](const std::vector<Td>& in) { return ops::scale(in[0], 1.0); }, {x}), ContractError);
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(0.0, 1e-9) == doctest::Approx(0.1));
}

TEST_CASE("bce gradient matches finite differences") {
  auto z = random_tensor({2, 1, 3, 3}, 43, -3, 3);
  Td y({2, 1, 3, 3});
  for (std::size_t i = 0; i < y.mutable_data().size(); i += 3) y.mutable_data()[i] = 1.0;
  auto r = grad_check([&](const std::vector<Td>& in) { return ops::bce_with_logits(in[0], y); }, {z});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("nan check mode") {
  NanCheckGuard guard;
  Td big({3}, {-1000.0, 0.0, 1000.0});
  CHECK_NOTHROW(ops::softmax(big, 0));
  CHECK_NOTHROW(ops::gelu(big));
  CHECK_NOTHROW(ops::sigmoid(big));
  Td zero({1});
  CHECK_THROWS_AS(ops::div(Td::scalar(1.0), zero), NumericError);
}

TEST_CASE("float and double share the code path") {
  auto xd = random_tensor<double>({1, 2, 5, 5}, 44);
  auto wd = random_tensor<double>({3, 2, 3, 3}, 45);
  auto xf = tensor_cast<float>(xd);
  auto wf = tensor_cast<float>(wd);
  auto yd = ops::conv2d(xd, wd, Td{}, {.padding = 1});
  auto yf = ops::conv2d(xf, wf, Tensor<float>{}, {.padding = 1});
  CHECK(mdtaf::testing::max_abs_diff(tensor_cast<double>(yf), yd) < 1e-5);
  auto again = ops::conv2d(xf, wf, Tensor<float>{}, {.padding = 1});
  CHECK(bit_equal(yf, again));
}
