#include "cli.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <vector>

#include "CLI11.hpp"
#include "mdtaf/bench.hpp"
#include "mdtaf/checkpoint.hpp"
#include "mdtaf/data.hpp"
#include "mdtaf/errors.hpp"
#include "mdtaf/model.hpp"
#include "mdtaf/train.hpp"
#include "mdtaf/verify.hpp"

namespace mdtaf::cli {

namespace {

using json = nlohmann::json;
using Override = std::function<void(FlatConfig&)>;

void put_section(FlatConfig& flat, const std::string& prefix, const json& obj) {
  for (const auto& [k, v] : obj.items()) flat[prefix + "." + k] = v;
}

void prefixed(json& target, const std::string& prefix, const json& obj) {
  for (const auto& [k, v] : obj.items()) target[prefix + "." + k] = v;
}

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  for (const auto& [k, v] : j.items()) {
    const auto key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) flatten(v, key, out);
    else out.emplace_back(key, v);
  }
}

template <typename T>
T get_as(const FlatConfig& flat, const std::string& key) {
  try {
    return flat.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type: " + flat.at(key).dump());
  }
}

// The non-null entries of `prefix.*`, without the prefix and without `skip`.
json section(const FlatConfig& flat, const std::string& prefix, const std::string& skip = {}) {
  json obj = json::object();
  for (const auto& [k, v] : flat) {
    if (k.rfind(prefix + ".", 0) != 0 || v.is_null()) continue;
    const auto name = k.substr(prefix.size() + 1);
    if (name != skip) obj[name] = v;
  }
  return obj;
}

std::uint64_t seed_for(const FlatConfig& flat, const std::string& key) {
  return flat.at(key).is_null() ? get_as<std::uint64_t>(flat, "seed") : get_as<std::uint64_t>(flat, key);
}

ModelConfig resolve_model(const FlatConfig& flat) {
  const auto preset = get_as<std::string>(flat, "model.preset");
  ModelConfig base;
  if (preset == "desk") base = ModelConfig::desk();
  else if (preset != "default") throw ConfigError("model.preset must be 'default' or 'desk', got '" + preset + "'");
  auto cfg = model_config_from_json(section(flat, "model", "preset"), base);
  cfg.seed = seed_for(flat, "model.seed");
  cfg.validate();
  return cfg;
}

SynthSpec resolve_data(const FlatConfig& flat) {
  auto spec = synth_spec_from_json(section(flat, "data"));
  spec.seed = seed_for(flat, "data.seed");
  spec.validate();
  return spec;
}

TrainConfig resolve_train(const FlatConfig& flat) {
  auto cfg = train_config_from_json(section(flat, "train"));
  cfg.seed = seed_for(flat, "train.seed");
  cfg.validate();
  return cfg;
}

int threads_of(const FlatConfig& flat) {
  const auto t = get_as<int>(flat, "threads");
  if (t < 1) throw ConfigError("threads must be >= 1, got " + std::to_string(t));
  return t;
}

LoadOptions load_options(const FlatConfig& flat, int channels) {
  LoadOptions opt;
  opt.height = get_as<int>(flat, "input.height");
  opt.width = get_as<int>(flat, "input.width");
  if (opt.height < 0 || opt.width < 0) throw ConfigError("input.height and input.width must be >= 0");
  opt.channels = channels;
  opt.threads = threads_of(flat);
  return opt;
}

BenchOptions resolve_bench(const FlatConfig& flat) {
  BenchOptions o;
  o.kinds.clear();
  for (const auto& k : get_as<std::vector<std::string>>(flat, "bench.kinds")) o.kinds.push_back(attention_kind_from_string(k));
  o.sizes = get_as<std::vector<std::int64_t>>(flat, "bench.sizes");
  o.channels = get_as<std::int64_t>(flat, "bench.channels");
  o.reductions = get_as<std::vector<std::int64_t>>(flat, "bench.reductions");
  o.window = get_as<std::int64_t>(flat, "bench.window");
  o.heads = get_as<int>(flat, "bench.heads");
  o.repeats = get_as<int>(flat, "bench.repeats");
  o.seed = get_as<std::uint64_t>(flat, "seed");
  o.validate();
  return o;
}

json pick(const FlatConfig& flat, std::initializer_list<const char*> prefixes) {
  json out = json::object();
  for (const auto& [k, v] : flat) {
    for (const char* p : prefixes) {
      const std::string pre(p);
      if (k == pre || k.rfind(pre + ".", 0) == 0) out[k] = v;
    }
  }
  return out;
}

void emit(std::ostream& out, const json& j) { out << j.dump() << '\n' << std::flush; }

json tagged(const char* event, const CheckResult& r) {
  json j = {{"event", event}};
  j.update(to_json(r));
  return j;
}

// [1, C, H, W] in [0, 1]; gray is replicated and RGB averaged to match `channels`.
Tensor<float> image_tensor(const PnmImage& img, int channels) {
  if (img.channels != channels && !(channels == 3 && img.channels == 1) && !(channels == 1 && img.channels == 3)) {
    throw ShapeError("cannot convert a " + std::to_string(img.channels) + "-channel image to " +
                     std::to_string(channels) + " channels");
  }
  const std::int64_t hw = static_cast<std::int64_t>(img.height) * img.width;
  Tensor<float> t({1, channels, img.height, img.width});
  auto d = t.mutable_data();
  for (std::int64_t i = 0; i < hw; ++i) {
    const auto* px = &img.pixels[static_cast<std::size_t>(i * img.channels)];
    for (int c = 0; c < channels; ++c) {
      float v;
      if (img.channels == channels) v = px[c];
      else if (img.channels == 1) v = px[0];
      else v = (static_cast<float>(px[0]) + px[1] + px[2]) / 3.0f;
      d[static_cast<std::size_t>(c * hw + i)] = v / 255.0f;
    }
  }
  return t;
}

// Binds `--flag` to one or more config keys; the value is applied after the
// config file and --set.
template <typename T>
CLI::Option* bind(CLI::App* app, std::vector<Override>& ov, const std::string& flag, std::vector<std::string> keys,
                  const std::string& help) {
  auto value = std::make_shared<T>();
  auto* opt = app->add_option(flag, *value, help);
  ov.push_back([value, opt, keys](FlatConfig& f) {
    if (opt->count() == 0) return;
    for (const auto& k : keys) f[k] = *value;
  });
  return opt;
}

void bind_switch(CLI::App* app, std::vector<Override>& ov, const std::string& flag, const std::string& key,
                 bool value, const std::string& help) {
  auto* opt = app->add_flag(flag, help);
  ov.push_back([opt, key, value](FlatConfig& f) {
    if (opt->count() != 0) f[key] = value;
  });
}

}  // namespace

FlatConfig default_config(std::uint64_t seed) {
  FlatConfig flat;
  flat["seed"] = seed;
  flat["threads"] = 1;
  flat["model.preset"] = "default";
  const auto model = to_json(ModelConfig{});
  for (const auto& [k, v] : model.items()) flat["model." + k] = nullptr;
  put_section(flat, "data", to_json(SynthSpec{}));
  flat["data.seed"] = nullptr;
  put_section(flat, "train", to_json(TrainConfig{}));
  flat["train.seed"] = nullptr;
  flat["input.height"] = 0;
  flat["input.width"] = 0;
  flat["bench.kinds"] = {"dense", "esa", "ssa", "csa"};
  flat["bench.sizes"] = {1024, 4096};
  flat["bench.channels"] = 64;
  flat["bench.reductions"] = {1, 2, 4, 8};
  flat["bench.window"] = 8;
  flat["bench.heads"] = 1;
  flat["bench.repeats"] = 3;
  return flat;
}

void merge_config(FlatConfig& config, const json& overrides, const std::string& origin) {
  if (!overrides.is_object()) throw ConfigError(origin + ": config must be a JSON object");
  std::vector<std::pair<std::string, json>> items;
  flatten(overrides, "", items);
  for (auto& [k, v] : items) {
    if (config.count(k) == 0) throw ConfigError(origin + ": unknown config key '" + k + "'");
    config[k] = std::move(v);
  }
}

std::uint64_t env_seed() {
  const char* s = std::getenv("MDTAF_SEED");
  if (s == nullptr || *s == '\0') return 0;
  const std::string str(s);
  if (str.find_first_not_of("0123456789") != std::string::npos || str.size() > 20) {
    throw ConfigError("MDTAF_SEED must be an unsigned integer, got '" + str + "'");
  }
  try {
    return std::stoull(str);
  } catch (const std::exception&) {
    throw ConfigError("MDTAF_SEED is out of range: '" + str + "'");
  }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::uint64_t seed0 = 0;
  try {
    seed0 = env_seed();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  CLI::App app{"Segmentation transformer toolkit: data, training, evaluation, inference and self-checks", "mdtaf"};
  app.require_subcommand(1);
  app.fallthrough();
  std::vector<Override> ov;
  std::string config_path;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "JSON config with flat dotted keys (e.g. \"model.stage_channels\")")
      ->check(CLI::ExistingFile);
  app.add_option("--set", sets, "Override one config key: KEY=JSON_VALUE (repeatable)");
  bind<std::uint64_t>(&app, ov, "--seed", {"seed"}, "Global seed (default: MDTAF_SEED or 0)");
  bind<int>(&app, ov, "--threads", {"threads"}, "Worker budget for data generation and loading");

  json args = json::object();

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic segmentation dataset");
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output directory")->required();
  bind<int>(gen, ov, "--count", {"data.count"}, "Number of samples");
  bind<int>(gen, ov, "--size", {"data.height", "data.width"}, "Square image size");
  bind<int>(gen, ov, "--height", {"data.height"}, "Image height");
  bind<int>(gen, ov, "--width", {"data.width"}, "Image width");
  bind<int>(gen, ov, "--channels", {"data.channels"}, "1 (PGM) or 3 (PPM)");
  bind<std::string>(gen, ov, "--family", {"data.family"}, "ellipses, blobs or lobes");
  bind<double>(gen, ov, "--fg", {"data.fg_mean"}, "Foreground intensity mean");
  bind<double>(gen, ov, "--bg", {"data.bg_mean"}, "Background intensity mean");
  bind<double>(gen, ov, "--sigma", {"data.noise_sigma"}, "Gaussian noise sigma");
  bind<int>(gen, ov, "--blur", {"data.blur_radius"}, "Box blur radius");

  auto add_model_flags = [&](CLI::App* sub) {
    bind<std::string>(sub, ov, "--preset", {"model.preset"}, "default or desk");
    bind_switch(sub, ov, "--no-filtering", "model.filtering", false, "Plain patch embedding (no filter gate)");
    bind_switch(sub, ov, "--no-msa", "model.msa", false, "ESA-only blocks");
    bind_switch(sub, ov, "--skip-mlp-residual", "model.skip_mlp_residual", true, "No residual around the block MLP");
  };
  auto add_size_flag = [&](CLI::App* sub) {
    bind<int>(sub, ov, "--size", {"input.height", "input.width"}, "Resize inputs to a square size (0 keeps)");
  };

  auto* tr = app.add_subcommand("train", "Train a model on a dataset directory");
  std::string train_data, eval_data;
  tr->add_option("--data", train_data, "Training dataset directory")->required();
  tr->add_option("--eval-data", eval_data, "Evaluation dataset directory (default: the training set)");
  bind<std::string>(tr, ov, "--out", {"train.checkpoint_path"}, "Checkpoint path (best DSC goes to <path>.best)");
  bind<std::string>(tr, ov, "--history", {"train.history_path"}, "JSON-lines history path");
  bind<int>(tr, ov, "--epochs", {"train.epochs"}, "Epochs");
  bind<int>(tr, ov, "--batch-size", {"train.batch_size"}, "Batch size");
  bind<std::int64_t>(tr, ov, "--max-steps", {"train.max_steps"}, "Step budget; overrides epochs when > 0");
  bind<double>(tr, ov, "--lr-max", {"train.lr_max"}, "Peak learning rate");
  bind<double>(tr, ov, "--lr-min", {"train.lr_min"}, "Final learning rate");
  bind<double>(tr, ov, "--weight-decay", {"train.weight_decay"}, "AdamW decoupled weight decay");
  bind<std::int64_t>(tr, ov, "--eval-interval", {"train.eval_interval"}, "Steps between evaluations (0: end only)");
  add_model_flags(tr);
  add_size_flag(tr);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset directory");
  std::string ev_ckpt, ev_data;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  add_size_flag(ev);

  auto* inf = app.add_subcommand("infer", "Predict a binary mask for one PGM/PPM image");
  std::string inf_ckpt, inf_image, inf_out;
  inf->add_option("--checkpoint", inf_ckpt, "Checkpoint file")->required();
  inf->add_option("--image", inf_image, "Input P5/P6 image")->required();
  inf->add_option("--out", inf_out, "Output mask (P5, values 0/255)")->required();

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check of one module");
  std::string gc_module = "block", gc_dims = "tiny";
  gc->add_option("--module", gc_module, "ops, embed, hourglass, esa, ssa, csa, block, decoder or model")
      ->check(CLI::IsMember(gradcheck_modules()));
  gc->add_option("--dims", gc_dims, "tiny or desk")->check(CLI::IsMember({"tiny", "desk"}));

  auto* vf = app.add_subcommand("verify", "Run the invariant suite");
  int shape_size = 512;
  std::string scratch;
  vf->add_option("--shape-size", shape_size, "Input size for the stage-shape check")->check(CLI::PositiveNumber);
  vf->add_option("--scratch", scratch, "Directory for temporary files");

  auto* bn = app.add_subcommand("bench", "Time attention variants; CSV on stdout");
  std::string bench_out;
  bn->add_option("--out", bench_out, "Also write the CSV here");
  bind<std::vector<std::string>>(bn, ov, "--kind", {"bench.kinds"}, "dense, esa, ssa, csa (repeatable)");
  bind<std::vector<std::int64_t>>(bn, ov, "--sizes", {"bench.sizes"}, "Token counts N (perfect squares)");
  bind<std::int64_t>(bn, ov, "--channels", {"bench.channels"}, "Channels C");
  bind<std::vector<std::int64_t>>(bn, ov, "--reductions", {"bench.reductions"}, "ESA reduction ratios R");
  bind<std::int64_t>(bn, ov, "--window", {"bench.window"}, "SSA window");
  bind<int>(bn, ov, "--heads", {"bench.heads"}, "Attention heads");
  bind<int>(bn, ov, "--repeats", {"bench.repeats"}, "Timed repeats (median reported)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  FlatConfig flat;
  try {
    flat = default_config(seed0);
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        throw ConfigError(config_path + ": " + e.what());
      }
      merge_config(flat, j, config_path);
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects KEY=VALUE, got '" + s + "'");
      const auto text = s.substr(eq + 1);
      json v = json::parse(text, nullptr, false);
      if (v.is_discarded()) v = text;
      merge_config(flat, json{{s.substr(0, eq), v}}, "--set");
    }
    for (const auto& apply : ov) apply(flat);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  auto announce = [&](const std::string& command, json config) {
    emit(out, {{"event", "config"}, {"command", command}, {"args", args}, {"config", std::move(config)}});
  };

  // Stage 1 validates the configuration (exit 2); stage 2 does the work (exit 1).
  std::function<int()> work;
  try {
    if (app.got_subcommand(gen)) {
      const auto spec = resolve_data(flat);
      const int threads = threads_of(flat);
      args = {{"out", gen_out}};
      auto shown = pick(flat, {"seed", "threads"});
      prefixed(shown, "data", to_json(spec));
      announce("gen-data", shown);
      work = [&, spec, threads] {
        const auto records = generate_dataset(spec, gen_out, threads);
        emit(out, {{"event", "done"}, {"count", records.size()}, {"out", gen_out},
                   {"snr", spec.snr() ? json(*spec.snr()) : json(nullptr)}});
        return kExitOk;
      };
    } else if (app.got_subcommand(tr)) {
      const auto model = resolve_model(flat);
      const auto tcfg = resolve_train(flat);
      const auto load = load_options(flat, model.input_channels);
      args = {{"data", train_data}, {"eval_data", eval_data}};
      auto shown = pick(flat, {"seed", "threads", "input"});
      shown["model.preset"] = flat.at("model.preset");
      prefixed(shown, "model", to_json(model));
      prefixed(shown, "train", to_json(tcfg));
      announce("train", shown);
      work = [&, model, tcfg, load] {
        const auto train_set = load_dataset(train_data, load);
        const auto eval_set = eval_data.empty() ? std::vector<SegSample>{} : load_dataset(eval_data, load);
        emit(out, {{"event", "data"}, {"train", train_set.size()}, {"eval", eval_set.size()},
                   {"params", param_count(model)}});
        const auto result = train(model, tcfg, train_set, eval_set, nullptr, [&](const json& rec) { emit(out, rec); });
        emit(out, {{"event", "done"}, {"final", to_json(result.final_metrics)}, {"best_dice", result.best_dice},
                   {"best_step", result.best_step}, {"checkpoint", tcfg.checkpoint_path}});
        return kExitOk;
      };
    } else if (app.got_subcommand(ev)) {
      args = {{"checkpoint", ev_ckpt}, {"data", ev_data}};
      announce("eval", pick(flat, {"threads", "input"}));
      load_options(flat, 0);
      work = [&] {
        const auto ck = load_checkpoint(ev_ckpt);
        const auto samples = load_dataset(ev_data, load_options(flat, ck.config.input_channels));
        emit(out, {{"event", "model"}, {"model", to_json(ck.config)}});
        emit(out, {{"event", "done"}, {"metrics", to_json(evaluate(ck.params, ck.config, samples))}});
        return kExitOk;
      };
    } else if (app.got_subcommand(inf)) {
      args = {{"checkpoint", inf_ckpt}, {"image", inf_image}, {"out", inf_out}};
      announce("infer", json::object());
      work = [&] {
        const auto ck = load_checkpoint(inf_ckpt);
        const auto img = read_pnm(inf_image);
        const auto logits = model_forward(image_tensor(img, ck.config.input_channels), ck.config, ck.params);
        const auto mask = threshold_logits(logits);
        PnmImage pgm{img.width, img.height, 1, {}};
        pgm.pixels.reserve(static_cast<std::size_t>(mask.numel()));
        std::int64_t fg = 0;
        for (float v : mask.data()) {
          pgm.pixels.push_back(v > 0.5f ? 255 : 0);
          fg += v > 0.5f;
        }
        write_pnm(pgm, inf_out);
        emit(out, {{"event", "done"}, {"out", inf_out}, {"width", img.width}, {"height", img.height},
                   {"foreground", static_cast<double>(fg) / static_cast<double>(mask.numel())}});
        return kExitOk;
      };
    } else if (app.got_subcommand(gc)) {
      const auto seed = get_as<std::uint64_t>(flat, "seed");
      const auto dims = grad_dims_from_string(gc_dims);
      args = {{"module", gc_module}, {"dims", gc_dims}};
      announce("gradcheck", pick(flat, {"seed"}));
      work = [&, seed, dims] {
        if (gc_module == "ops") {
          for (const auto& r : op_gradient_checks(seed)) emit(out, tagged("check", r));
        }
        const auto r = module_gradient_check(gc_module, dims, seed);
        emit(out, tagged("result", r));
        return r.passed ? kExitOk : kExitFailed;
      };
    } else if (app.got_subcommand(vf)) {
      args = {{"shape_size", shape_size}, {"scratch", scratch}};
      announce("verify", json::object());
      work = [&] {
        int failed = 0;
        const auto results = run_verify_suite({scratch, shape_size}, [&](const CheckResult& r) {
          failed += !r.passed;
          emit(out, tagged("check", r));
        });
        emit(out, {{"event", "summary"}, {"checks", results.size()}, {"failed", failed}});
        return failed == 0 ? kExitOk : kExitFailed;
      };
    } else if (app.got_subcommand(bn)) {
      const auto opts = resolve_bench(flat);
      args = {{"out", bench_out}};
      announce("bench", pick(flat, {"seed", "bench"}));
      work = [&, opts] {
        std::ofstream file;
        if (!bench_out.empty()) {
          file.open(bench_out);
          if (!file) throw IoError("cannot write " + bench_out);
          file << kBenchCsvHeader << '\n';
        }
        out << kBenchCsvHeader << '\n';
        run_bench(opts, [&](const BenchRow& row) {
          write_bench_row(out, row);
          out.flush();
          if (file.is_open()) write_bench_row(file, row);
        });
        return kExitOk;
      };
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    return work();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailed;
  }
}

}  // namespace mdtaf::cli
