#include "mdtaf/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "mdtaf/checkpoint.hpp"
#include "mdtaf/ops.hpp"

namespace mdtaf {

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.rank() != 4 || logits.dim(1) != 1) {
    throw ShapeError("bce_loss expects [B,1,H,W] logits, got " + shape_str(logits.shape()));
  }
  return ops::bce_with_logits(logits, targets);
}

template Tensor<float> bce_loss<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> bce_loss<double>(const Tensor<double>&, const Tensor<double>&);

void AdamW::step(ParamStore<float>& params, double lr) {
  auto& tensors = params.tensors();
  if (m_.empty()) {
    for (const auto& t : tensors) {
      m_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
      v_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    }
  }
  if (m_.size() != tensors.size()) throw ContractError("AdamW: parameter set changed between steps");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (!tensors[i].has_grad()) throw ContractError("AdamW: parameter " + params.names()[i] + " has no gradient");
    if (m_[i].size() != static_cast<std::size_t>(tensors[i].numel())) {
      throw ContractError("AdamW: parameter " + params.names()[i] + " changed size");
    }
  }
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double decay = 1.0 - lr * cfg_.weight_decay;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto theta = tensors[i].mutable_data();
    auto grad = tensors[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double g = grad[k];
      m[k] = b1 * m[k] + (1.0 - b1) * g;
      v[k] = b2 * v[k] + (1.0 - b2) * g * g;
      double p = static_cast<double>(theta[k]) * decay;
      p -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
      theta[k] = static_cast<float>(p);
    }
  }
}

double cosine_lr(std::int64_t step, std::int64_t total, double lr_max, double lr_min) {
  if (total < 0 || step < 0 || step > total) {
    throw ConfigError("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
  }
  if (step == 0) return lr_max;
  if (step == total) return lr_min;
  const double c = std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total));
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + c);
}

namespace {

struct Confusion {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

Confusion confusion(const Tensor<float>& pred, const Tensor<float>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("metric masks differ: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  Confusion c;
  auto p = pred.data();
  auto t = target.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool pp = p[i] > 0.5f, tt = t[i] > 0.5f;
    if (pp && tt) ++c.tp;
    else if (pp) ++c.fp;
    else if (tt) ++c.fn;
    else ++c.tn;
  }
  return c;
}

void write_line(std::ofstream* out, const nlohmann::json& rec) {
  if (!out) return;
  *out << rec.dump() << '\n';
  out->flush();
  if (!*out) throw IoError("failed writing training history");
}

}  // namespace

double dice_score(const Tensor<float>& pred, const Tensor<float>& target) {
  const auto c = confusion(pred, target);
  return (2.0 * c.tp + kDiceEps) / (2.0 * c.tp + c.fp + c.fn + kDiceEps);
}

double accuracy(const Tensor<float>& pred, const Tensor<float>& target) {
  const auto c = confusion(pred, target);
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(pred.numel());
}

Tensor<float> threshold_logits(const Tensor<float>& logits) {
  Tensor<float> out(logits.shape());
  auto src = logits.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > 0.0f ? 1.0f : 0.0f;
  return out;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (epochs < 1) fail("epochs must be at least 1");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (max_steps < 0) fail("max_steps must be non-negative");
  if (eval_interval < 0) fail("eval_interval must be non-negative");
  if (!(lr_min >= 0) || !(lr_min <= lr_max)) fail("need 0 <= lr_min <= lr_max");
  if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1) || !(optimizer.beta2 >= 0 && optimizer.beta2 < 1)) {
    fail("betas must lie in [0, 1)");
  }
  if (!(optimizer.eps > 0)) fail("eps must be positive");
  if (!(optimizer.weight_decay >= 0)) fail("weight_decay must be non-negative");
}

std::int64_t TrainConfig::total_steps(std::size_t dataset_size) const {
  if (max_steps > 0) return max_steps;
  const auto per_epoch = (static_cast<std::int64_t>(dataset_size) + batch_size - 1) / batch_size;
  return per_epoch * epochs;
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"max_steps", cfg.max_steps},
          {"lr_max", cfg.lr_max},
          {"lr_min", cfg.lr_min},
          {"beta1", cfg.optimizer.beta1},
          {"beta2", cfg.optimizer.beta2},
          {"eps", cfg.optimizer.eps},
          {"weight_decay", cfg.optimizer.weight_decay},
          {"seed", cfg.seed},
          {"eval_interval", cfg.eval_interval},
          {"checkpoint_path", cfg.checkpoint_path},
          {"history_path", cfg.history_path}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig cfg) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "epochs") cfg.epochs = value.get<int>();
      else if (key == "batch_size") cfg.batch_size = value.get<int>();
      else if (key == "max_steps") cfg.max_steps = value.get<std::int64_t>();
      else if (key == "lr_max") cfg.lr_max = value.get<double>();
      else if (key == "lr_min") cfg.lr_min = value.get<double>();
      else if (key == "beta1") cfg.optimizer.beta1 = value.get<double>();
      else if (key == "beta2") cfg.optimizer.beta2 = value.get<double>();
      else if (key == "eps") cfg.optimizer.eps = value.get<double>();
      else if (key == "weight_decay") cfg.optimizer.weight_decay = value.get<double>();
      else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
      else if (key == "eval_interval") cfg.eval_interval = value.get<std::int64_t>();
      else if (key == "checkpoint_path") cfg.checkpoint_path = value.get<std::string>();
      else if (key == "history_path") cfg.history_path = value.get<std::string>();
      else throw ConfigError("unknown train config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("train config key '" + key + "': " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

nlohmann::json to_json(const Metrics& m) {
  return {{"acc", m.accuracy}, {"dice", m.dice}, {"loss", m.loss}, {"count", m.count}};
}

Metrics evaluate(const ParamStore<float>& params, const ModelConfig& model, const std::vector<SegSample>& samples) {
  if (samples.empty()) throw ConfigError("evaluate: empty dataset");
  Metrics m;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto batch = make_batch(samples, {i});
    const auto logits = model_forward(batch.images, model, params);
    m.loss += bce_loss(logits, batch.masks).item();
    const auto pred = threshold_logits(logits);
    m.dice += dice_score(pred, batch.masks);
    m.accuracy += accuracy(pred, batch.masks);
  }
  const auto n = static_cast<double>(samples.size());
  m.loss /= n;
  m.dice /= n;
  m.accuracy /= n;
  m.count = static_cast<std::int64_t>(samples.size());
  return m;
}

Metrics evaluate(const std::string& checkpoint_path, const std::vector<SegSample>& samples) {
  const auto ck = load_checkpoint(checkpoint_path);
  return evaluate(ck.params, ck.config, samples);
}

TrainResult train(const ModelConfig& model, const TrainConfig& cfg, const std::vector<SegSample>& train_set,
                  const std::vector<SegSample>& eval_set, const ParamStore<float>* initial,
                  const ProgressFn& progress) {
  cfg.validate();
  model.validate();
  if (train_set.empty()) throw ConfigError("train: empty dataset");
  if (train_set.front().image.dim(0) != model.input_channels) {
    throw ConfigError("train: samples have " + std::to_string(train_set.front().image.dim(0)) +
                      " channels, model expects " + std::to_string(model.input_channels));
  }
  const auto& eval_on = eval_set.empty() ? train_set : eval_set;

  TrainResult result;
  if (initial) {
    check_against_layout(*initial, model_layout(model));
    for (std::size_t i = 0; i < initial->size(); ++i) {
      result.params.insert(initial->names()[i], initial->tensors()[i].clone());
    }
  } else {
    result.params = init_params(model, model.seed);
  }
  auto& params = result.params;
  params.set_requires_grad(true);

  std::ofstream history_file;
  std::ofstream* history = nullptr;
  if (!cfg.history_path.empty()) {
    history_file.open(cfg.history_path, std::ios::trunc);
    if (!history_file) throw IoError("cannot write history " + cfg.history_path);
    history = &history_file;
  }
  auto emit = [&](const nlohmann::json& rec) {
    result.history.push_back(rec);
    write_line(history, rec);
    if (progress) progress(rec);
  };

  const auto n = train_set.size();
  const auto total = cfg.total_steps(n);
  AdamW opt(cfg.optimizer);
  std::vector<std::size_t> order(n);
  std::size_t cursor = n;
  std::uint64_t epoch = 0;

  for (std::int64_t s = 0; s < total; ++s) {
    if (cursor >= n) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::mt19937_64 rng(sample_seed(cfg.seed, epoch++));
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const auto take = std::min(n - cursor, static_cast<std::size_t>(cfg.batch_size));
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                 order.begin() + static_cast<std::ptrdiff_t>(cursor + take));
    cursor += take;
    const auto batch = make_batch(train_set, idx);

    const double lr = cosine_lr(s, std::max<std::int64_t>(total - 1, 0), cfg.lr_max, cfg.lr_min);
    params.zero_grad();
    double loss_value = 0;
    {
      Tape<float> tape;
      TapeScope<float> scope(tape);
      const auto loss = bce_loss(model_forward(batch.images, model, params), batch.masks);
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw NumericError("non-finite loss " + std::to_string(loss_value) + " at step " + std::to_string(s + 1));
      }
      tape.backward(loss);
    }
    opt.step(params, lr);
    clamp_temperatures(params);
    result.losses.push_back(loss_value);
    result.lrs.push_back(lr);
    emit({{"kind", "train"}, {"step", s + 1}, {"lr", lr}, {"loss", loss_value}});

    const bool last = s + 1 == total;
    if (last || (cfg.eval_interval > 0 && (s + 1) % cfg.eval_interval == 0)) {
      const auto m = evaluate(params, model, eval_on);
      emit({{"kind", "eval"}, {"step", s + 1}, {"acc", m.accuracy}, {"dice", m.dice}, {"loss", m.loss}});
      if (m.dice > result.best_dice) {
        result.best_dice = m.dice;
        result.best_step = s + 1;
        if (!cfg.checkpoint_path.empty()) save_checkpoint(params, model, cfg.checkpoint_path + ".best");
      }
      if (last) result.final_metrics = m;
    }
  }
  if (!cfg.checkpoint_path.empty()) save_checkpoint(params, model, cfg.checkpoint_path);
  params.set_requires_grad(false);
  params.zero_grad();
  return result;
}

}  // namespace mdtaf
