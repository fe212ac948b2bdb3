#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "doctest.h"
#include "mdtaf/checkpoint.hpp"
#include "mdtaf/gradcheck.hpp"
#include "mdtaf/train.hpp"
#include "test_util.hpp"

using namespace mdtaf;
using namespace mdtaf::testing;
using Tf = Tensor<float>;
using Td = Tensor<double>;

namespace {

std::vector<SegSample> synth(int count, int size, std::uint64_t seed) {
  SynthSpec s;
  s.height = size;
  s.width = size;
  s.seed = seed;
  s.count = count;
  std::vector<SegSample> out;
  for (int i = 0; i < count; ++i) {
    const auto r = render_sample(s, static_cast<std::uint64_t>(i));
    out.push_back(to_sample("s" + std::to_string(i), r.image, r.mask));
  }
  return out;
}

TrainConfig quick(std::int64_t steps) {
  TrainConfig t;
  t.max_steps = steps;
  t.batch_size = 2;
  t.lr_max = 1e-3;
  t.lr_min = 1e-5;
  t.seed = 5;
  return t;
}

ParamStore<float> scalar_store(float theta, float grad) {
  ParamStore<float> p;
  Tf t({1}, {theta}, true);
  t.mutable_grad()[0] = grad;
  p.insert("theta", t);
  return p;
}

}  // namespace

TEST_CASE("bce_loss closed-form values") {
  Td half({2, 1, 3, 3}, {1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 0, 0, 1, 1, 1, 0, 1, 0});
  CHECK(std::abs(bce_loss(Td::zeros({2, 1, 3, 3}), half).item() - std::log(2.0)) < 1e-12);
  Td y({1, 1, 2, 2}, {1, 0, 0, 1});
  Td z({1, 1, 2, 2}, {40, -40, -40, 40});
  CHECK(bce_loss(z, y).item() < 1e-15);
  const Td one({1, 1, 1, 1}, std::vector<double>{1.0});
  CHECK(bce_loss(Td({1, 1, 1, 1}, std::vector<double>{std::log(3.0)}), one).item() ==
        doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-14));
  // Stable form at extreme logits: the naive log(sigmoid) would give inf.
  CHECK(bce_loss(Td({1, 1, 1, 1}, std::vector<double>{-800.0}), one).item() == doctest::Approx(800.0));

  CHECK_THROWS_AS(bce_loss(Td::zeros({1, 1, 2, 2}), Td::zeros({1, 1, 2, 3})), ShapeError);
  CHECK_THROWS_AS(bce_loss(Td::zeros({1, 1, 1, 2}), Td({1, 1, 1, 2}, {0.0, 0.5})), ShapeError);
  CHECK_THROWS_AS(bce_loss(Td::zeros({1, 2, 1, 1}), Td::zeros({1, 2, 1, 1})), ShapeError);
}

TEST_CASE("bce_loss gradient matches finite differences") {
  auto y = random_tensor({2, 1, 4, 5}, 3, 0, 1);
  for (auto& v : y.mutable_data()) v = v > 0.5 ? 1.0 : 0.0;
  const auto z = random_tensor({2, 1, 4, 5}, 4, -6, 6);
  const auto r = grad_check([&](const std::vector<Td>& in) { return bce_loss(in[0], y); }, {z});
  MESSAGE("bce max rel err " << r.max_rel_error);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("AdamW update rule") {
  SUBCASE("zero gradient without decay leaves parameters unchanged") {
    auto p = scalar_store(0.37f, 0.0f);
    AdamW opt({0.9, 0.999, 1e-8, 0.0});
    for (int i = 0; i < 5; ++i) opt.step(p, 0.1);
    CHECK(p.get("theta").item() == 0.37f);
    CHECK(opt.steps() == 5);
  }
  SUBCASE("first step moves by about lr") {
    auto p = scalar_store(1.0f, 1.0f);
    AdamW opt({0.9, 0.999, 1e-8, 0.0});
    opt.step(p, 0.1);
    CHECK(p.get("theta").item() == doctest::Approx(0.9).epsilon(1e-7));
    // Second step, g = -2: m = -0.11, v = 0.004999, bias-corrected by 0.19 and 0.001999.
    p.get("theta").mutable_grad()[0] = -2.0f;
    opt.step(p, 0.1);
    CHECK(p.get("theta").item() == doctest::Approx(0.9366103534720749).epsilon(1e-7));
    CHECK(opt.first_moments()[0][0] == doctest::Approx(-0.11));
    CHECK(opt.second_moments()[0][0] == doctest::Approx(0.004999));
  }
  SUBCASE("decay alone scales by 1 - lr wd per step") {
    auto p = scalar_store(2.0f, 0.0f);
    AdamW opt({0.9, 0.999, 1e-8, 1e-2});
    for (int i = 0; i < 3; ++i) opt.step(p, 0.5);
    CHECK(p.get("theta").item() == doctest::Approx(2.0 * std::pow(1.0 - 0.5 * 1e-2, 3)).epsilon(1e-7));
  }
  SUBCASE("missing gradient") {
    ParamStore<float> p;
    p.insert("w", Tf({2}));
    AdamW opt;
    CHECK_THROWS_AS(opt.step(p, 0.1), ContractError);
  }
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 1000, 1e-4, 1e-6) == 1e-4);
  CHECK(cosine_lr(1000, 1000, 1e-4, 1e-6) == 1e-6);
  CHECK(cosine_lr(500, 1000, 1e-4, 1e-6) == doctest::Approx(5.05e-5).epsilon(1e-12));
  CHECK(cosine_lr(0, 0, 1e-4, 1e-6) == 1e-4);
  double prev = 1.0;
  bool monotone = true;
  for (int s = 0; s <= 777; ++s) {
    const double lr = cosine_lr(s, 777, 1e-4, 1e-6);
    monotone = monotone && lr <= prev && lr >= 1e-6 && lr <= 1e-4;
    prev = lr;
  }
  CHECK(monotone);
  CHECK_THROWS_AS(cosine_lr(-1, 10, 1e-4, 1e-6), ConfigError);
  CHECK_THROWS_AS(cosine_lr(11, 10, 1e-4, 1e-6), ConfigError);
}

TEST_CASE("dice and accuracy") {
  Tf a({1, 1, 2, 3}, {1, 1, 0, 0, 0, 1});
  CHECK(dice_score(a, a) == 1.0);
  CHECK(accuracy(a, a) == 1.0);
  Tf b({1, 1, 2, 3}, {0, 0, 1, 1, 1, 0});
  CHECK(dice_score(a, b) < 1e-6);
  CHECK(accuracy(a, b) == 0.0);
  Tf p({1, 1, 1, 4}, {1, 1, 0, 0});
  Tf t({1, 1, 1, 4}, {0, 1, 1, 0});
  CHECK(dice_score(p, t) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(accuracy(p, t) == 0.5);
  CHECK(dice_score(Tf::zeros({1, 1, 2, 2}), Tf::zeros({1, 1, 2, 2})) == 1.0);
  CHECK_THROWS_AS(dice_score(a, p), ShapeError);
  CHECK_THROWS_AS(accuracy(a, p), ShapeError);

  CHECK(threshold_logits(Tf({4}, {-1.0f, 0.0f, 1e-30f, 3.0f})).to_vector() == std::vector<float>{0, 0, 1, 1});

  // Shared pixel permutations leave both metrics unchanged.
  std::mt19937_64 rng(8);
  auto pr = random_tensor<float>({1, 1, 16, 16}, 9, 0, 1);
  auto tr = random_tensor<float>({1, 1, 16, 16}, 10, 0, 1);
  for (auto* m : {&pr, &tr}) {
    for (auto& v : m->mutable_data()) v = v > 0.6f ? 1.0f : 0.0f;
  }
  std::vector<std::size_t> perm(256);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  Tf pp({1, 1, 16, 16}), tp({1, 1, 16, 16});
  for (std::size_t i = 0; i < 256; ++i) {
    pp.mutable_data()[i] = pr.data()[perm[i]];
    tp.mutable_data()[i] = tr.data()[perm[i]];
  }
  CHECK(dice_score(pp, tp) == dice_score(pr, tr));
  CHECK(accuracy(pp, tp) == accuracy(pr, tr));
}

TEST_CASE("train config validation and JSON") {
  TrainConfig t;
  t.max_steps = 12;
  t.history_path = "h.jsonl";
  CHECK(to_json(train_config_from_json(to_json(t))) == to_json(t));
  CHECK_THROWS_AS(train_config_from_json({{"lr_min", 1.0}, {"lr_max", 0.5}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json({{"epochs", 0}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json({{"momentum", 0.9}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json({{"batch_size", "8"}}), ConfigError);
  TrainConfig e;
  e.epochs = 3;
  e.batch_size = 4;
  CHECK(e.total_steps(9) == 9);
  e.max_steps = 5;
  CHECK(e.total_steps(9) == 5);
}

TEST_CASE("a zero learning rate step changes nothing") {
  const auto data = synth(2, 32, 1);
  const auto model = ModelConfig::desk();
  auto cfg = quick(1);
  cfg.lr_max = cfg.lr_min = 0;
  const auto init = init_params(model, model.seed);
  const auto batch = make_batch(data, {0, 1});
  const double initial_loss = bce_loss(model_forward(batch.images, model, init), batch.masks).item();

  const auto r = train(model, cfg, data);
  REQUIRE(r.losses.size() == 1);
  CHECK(r.losses[0] == initial_loss);
  bool same = true;
  for (std::size_t i = 0; i < init.size(); ++i) same = same && bit_equal(init.tensors()[i], r.params.tensors()[i]);
  CHECK(same);

  // Several steps with zero gradients and no decay: AdamW itself is a no-op.
  auto p = init_params(model, 3);
  const auto before = init_params(model, 3);
  for (auto& t : p.tensors()) t.mutable_grad();
  AdamW opt({0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 3; ++i) opt.step(p, 1e-2);
  same = true;
  for (std::size_t i = 0; i < p.size(); ++i) same = same && bit_equal(p.tensors()[i], before.tensors()[i]);
  CHECK(same);
}

TEST_CASE("training is reproducible and writes history and checkpoints") {
  const auto data = synth(3, 32, 2);
  const auto model = ModelConfig::desk();
  TempDir dir("train");
  auto cfg = quick(4);
  cfg.eval_interval = 2;
  cfg.checkpoint_path = dir.file("run1.bin");
  cfg.history_path = dir.file("run1.jsonl");
  std::vector<std::string> seen;
  const auto r1 = train(model, cfg, data, {}, nullptr, [&](const nlohmann::json& rec) { seen.push_back(rec["kind"]); });
  cfg.checkpoint_path = dir.file("run2.bin");
  cfg.history_path = dir.file("run2.jsonl");
  const auto r2 = train(model, cfg, data);

  CHECK(r1.losses == r2.losses);
  CHECK(slurp(dir.file("run1.bin")) == slurp(dir.file("run2.bin")));
  CHECK(slurp(dir.file("run1.jsonl")) == slurp(dir.file("run2.jsonl")));
  CHECK(std::filesystem::exists(dir.file("run1.bin.best")));

  // 4 steps with evaluations after steps 2 and 4.
  CHECK(seen == std::vector<std::string>{"train", "train", "eval", "train", "train", "eval"});
  std::ifstream in(dir.file("run1.jsonl"));
  std::vector<nlohmann::json> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(nlohmann::json::parse(line));
  REQUIRE(lines.size() == 6);
  CHECK(lines == r1.history);
  CHECK(lines[0]["lr"].get<double>() == cfg.lr_max);
  CHECK(lines[4]["lr"].get<double>() == cfg.lr_min);
  CHECK(lines[5]["step"] == 4);

  // The saved checkpoint reproduces the final evaluation exactly, twice.
  const auto m1 = evaluate(dir.file("run1.bin"), data);
  const auto m2 = evaluate(dir.file("run1.bin"), data);
  CHECK(m1.dice == lines[5]["dice"].get<double>());
  CHECK(m1.accuracy == lines[5]["acc"].get<double>());
  CHECK(m1.loss == lines[5]["loss"].get<double>());
  CHECK(to_json(m1) == to_json(m2));
  CHECK(m1.count == 3);

  auto other = cfg;
  other.seed = 6;
  other.checkpoint_path.clear();
  other.history_path.clear();
  CHECK(train(model, other, data).losses != r1.losses);
}

TEST_CASE("evaluate leaves parameters alone and an untrained model sits near the constant baseline") {
  const auto data = synth(12, 64, 3);
  const auto model = ModelConfig::desk();
  const auto params = init_params(model, 0);
  const auto before = init_params(model, 0);
  const auto m = evaluate(params, model, data);
  bool same = true;
  for (std::size_t i = 0; i < params.size(); ++i) same = same && bit_equal(params.tensors()[i], before.tensors()[i]);
  CHECK(same);

  // A prediction independent of the target scores at most 2f/(1+f) on average.
  const double f = foreground_fraction(data);
  const double bound = 2 * f / (1 + f);
  MESSAGE("untrained dice " << m.dice << ", acc " << m.accuracy << ", fg " << f << ", bound " << bound);
  CHECK(m.dice <= bound + 0.05);
  CHECK(m.loss == doctest::Approx(std::log(2.0)).epsilon(0.05));
  CHECK(m.accuracy >= 0.0);
  CHECK(m.accuracy <= 1.0);
}

TEST_CASE("training error paths") {
  const auto model = ModelConfig::desk();
  CHECK_THROWS_AS(train(model, quick(1), {}), ConfigError);
  auto gray = synth(1, 32, 4);
  gray[0].image = ops::slice(ops::reshape(gray[0].image, {1, 3, 32, 32}), 1, 0, 1);
  gray[0].image = ops::reshape(gray[0].image, {1, 32, 32});
  CHECK_THROWS_AS(train(model, quick(1), gray), ConfigError);

  auto bad = init_params(model, 0);
  bad.get("decoder.head.bias").mutable_data()[0] = std::nanf("");
  bool thrown = false;
  try {
    train(model, quick(3), synth(2, 32, 4), {}, &bad);
  } catch (const NumericError& e) {
    thrown = true;
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
  CHECK(thrown);
  CHECK_THROWS_AS(evaluate(init_params(model, 0), model, {}), ConfigError);
}

TEST_CASE("loss falls over the opening steps of an overfit run") {
  const auto data = synth(8, 64, 7);
  auto cfg = quick(50);
  cfg.batch_size = 8;
  cfg.lr_max = 3e-3;
  cfg.lr_min = 1e-6;
  const auto r = train(ModelConfig::desk(), cfg, data);
  std::vector<double> avg;
  for (std::size_t k = 0; k + 10 <= r.losses.size(); ++k) {
    avg.push_back(std::accumulate(r.losses.begin() + static_cast<std::ptrdiff_t>(k),
                                  r.losses.begin() + static_cast<std::ptrdiff_t>(k + 10), 0.0) / 10.0);
  }
  bool monotone = true;
  for (std::size_t k = 1; k < avg.size(); ++k) monotone = monotone && avg[k] <= avg[k - 1];
  MESSAGE("10-step average " << avg.front() << " -> " << avg.back());
  CHECK(monotone);
  CHECK(avg.back() < avg.front());
}
