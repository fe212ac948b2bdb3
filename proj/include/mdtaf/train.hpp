#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mdtaf/data.hpp"
#include "mdtaf/model.hpp"
#include "mdtaf/param_store.hpp"

namespace mdtaf {

// Mean pixel-wise sigmoid cross entropy over [B, 1, H, W] logits, in the
// stable log-sum-exp form. Targets must be 0 or 1 (ShapeError otherwise).
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& logits, const Tensor<T>& targets);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

// AdamW with decoupled weight decay and bias-corrected moments. Moments are
// kept in double.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  // theta <- theta (1 - lr wd), then theta <- theta - lr m_hat / (sqrt(v_hat) + eps).
  // Throws ContractError if a parameter has no gradient.
  void step(ParamStore<float>& params, double lr);

  std::int64_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// lr_min + (lr_max - lr_min)(1 + cos(pi step / total)) / 2, returning lr_max
// and lr_min exactly at the endpoints. Throws ConfigError if step is outside
// [0, total].
double cosine_lr(std::int64_t step, std::int64_t total, double lr_max, double lr_min);

inline constexpr double kDiceEps = 1e-6;

// Both masks hold 0/1 values of the same shape.
double dice_score(const Tensor<float>& pred, const Tensor<float>& target);
double accuracy(const Tensor<float>& pred, const Tensor<float>& target);
// sigmoid(logit) > 0.5, i.e. logit > 0.
Tensor<float> threshold_logits(const Tensor<float>& logits);

struct Metrics {
  double accuracy = 0.0;
  double dice = 0.0;
  double loss = 0.0;
  std::int64_t count = 0;
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 8;
  // Overrides epochs when positive.
  std::int64_t max_steps = 0;
  double lr_max = 1e-4;
  double lr_min = 1e-6;
  AdamWConfig optimizer;
  std::uint64_t seed = 0;
  // Evaluate every this many steps; 0 evaluates only after the last step.
  std::int64_t eval_interval = 0;
  // Final parameters go here and the best-DSC ones to <path>.best; empty skips.
  std::string checkpoint_path;
  // JSON-lines history; empty skips.
  std::string history_path;

  void validate() const;
  std::int64_t total_steps(std::size_t dataset_size) const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct TrainResult {
  ParamStore<float> params;
  // One {step, lr, loss} record per step and one {step, acc, dice, loss}
  // record per evaluation, in emission order.
  std::vector<nlohmann::json> history;
  std::vector<double> losses;
  std::vector<double> lrs;
  Metrics final_metrics;
  double best_dice = -1.0;
  std::int64_t best_step = 0;
};

using ProgressFn = std::function<void(const nlohmann::json&)>;

// Starts from init_params(model, model.seed) unless `initial` is given;
// cfg.seed drives the per-epoch shuffle.
// Evaluation runs on `eval_set`, or on `train_set` when it is empty. Throws
// NumericError naming the step on a non-finite loss.
TrainResult train(const ModelConfig& model, const TrainConfig& cfg, const std::vector<SegSample>& train_set,
                  const std::vector<SegSample>& eval_set = {}, const ParamStore<float>* initial = nullptr,
                  const ProgressFn& progress = {});

// Per-sample metrics averaged over the dataset. Parameters are not touched.
Metrics evaluate(const ParamStore<float>& params, const ModelConfig& model, const std::vector<SegSample>& samples);
Metrics evaluate(const std::string& checkpoint_path, const std::vector<SegSample>& samples);

nlohmann::json to_json(const Metrics& m);

}  // namespace mdtaf
