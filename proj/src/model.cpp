#include "mdtaf/model.hpp"

#include <algorithm>

#include "mdtaf/ops.hpp"
#include "ops_internal.hpp"

namespace mdtaf {

namespace {

std::string stage_prefix(int s) { return "stage" + std::to_string(s + 1); }

}  // namespace

ModelConfig ModelConfig::desk() {
  ModelConfig cfg;
  cfg.stage_channels = {16, 32, 40, 64};
  cfg.stage_depths = {1, 1, 1, 1};
  cfg.decoder_embed_dim = 64;
  return cfg;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (input_channels <= 0) fail("input_channels must be positive");
  if (decoder_embed_dim <= 0) fail("decoder_embed_dim must be positive");
  if (num_classes <= 0) fail("num_classes must be positive");
  if (mlp_ratio <= 0) fail("mlp_ratio must be positive");
  for (int s = 0; s < kStages; ++s) {
    if (stage_depths[s] < 0) fail("stage_depths[" + std::to_string(s) + "] is negative");
    try {
      block(s).attn.validate();
    } catch (const ConfigError& e) {
      fail("stage " + std::to_string(s + 1) + ": " + e.what());
    }
  }
}

PatchEmbedConfig ModelConfig::embed(int stage) const {
  const int in = stage == 0 ? input_channels : stage_channels[stage - 1];
  return stage == 0 ? PatchEmbedConfig::first_stage(in, stage_channels[0])
                    : PatchEmbedConfig::later_stage(in, stage_channels[stage]);
}

BlockConfig ModelConfig::block(int stage) const {
  BlockConfig b;
  b.attn = {stage_channels[stage], heads[stage], reductions[stage], window, r1, r2};
  b.mlp_ratio = mlp_ratio;
  b.msa = msa;
  b.skip_mlp_residual = skip_mlp_residual;
  return b;
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return {
      {"input_channels", cfg.input_channels},
      {"stage_channels", cfg.stage_channels},
      {"stage_depths", cfg.stage_depths},
      {"heads", cfg.heads},
      {"reductions", cfg.reductions},
      {"window", cfg.window},
      {"r1", cfg.r1},
      {"r2", cfg.r2},
      {"mlp_ratio", cfg.mlp_ratio},
      {"decoder_embed_dim", cfg.decoder_embed_dim},
      {"num_classes", cfg.num_classes},
      {"filtering", cfg.filtering},
      {"msa", cfg.msa},
      {"skip_mlp_residual", cfg.skip_mlp_residual},
      {"seed", cfg.seed},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig cfg) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "input_channels") cfg.input_channels = value.get<int>();
      else if (key == "stage_channels") cfg.stage_channels = value.get<std::array<int, kStages>>();
      else if (key == "stage_depths") cfg.stage_depths = value.get<std::array<int, kStages>>();
      else if (key == "heads") cfg.heads = value.get<std::array<int, kStages>>();
      else if (key == "reductions") cfg.reductions = value.get<std::array<int, kStages>>();
      else if (key == "window") cfg.window = value.get<int>();
      else if (key == "r1") cfg.r1 = value.get<int>();
      else if (key == "r2") cfg.r2 = value.get<int>();
      else if (key == "mlp_ratio") cfg.mlp_ratio = value.get<int>();
      else if (key == "decoder_embed_dim") cfg.decoder_embed_dim = value.get<int>();
      else if (key == "num_classes") cfg.num_classes = value.get<int>();
      else if (key == "filtering") cfg.filtering = value.get<bool>();
      else if (key == "msa") cfg.msa = value.get<bool>();
      else if (key == "skip_mlp_residual") cfg.skip_mlp_residual = value.get<bool>();
      else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
      else throw ConfigError("unknown model config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("model config key '" + key + "': " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

ParamLayout model_layout(const ModelConfig& cfg) {
  cfg.validate();
  ParamLayout layout;
  for (int s = 0; s < kStages; ++s) {
    const auto p = stage_prefix(s);
    declare_patch_embed_params(layout, p + ".embed", cfg.embed(s), cfg.filtering);
    for (int d = 0; d < cfg.stage_depths[s]; ++d) {
      declare_block_params(layout, p + ".block" + std::to_string(d + 1), cfg.block(s));
    }
  }
  const std::int64_t e = cfg.decoder_embed_dim;
  for (int s = 0; s < kStages; ++s) {
    layout.add_weight_bias("decoder.proj" + std::to_string(s + 1), {cfg.stage_channels[s], e}, e);
  }
  layout.add_weight_bias("decoder.fuse", {kStages * e, e}, e);
  layout.add_weight_bias("decoder.head", {e, cfg.num_classes}, cfg.num_classes);
  return layout;
}

std::int64_t param_count(const ModelConfig& cfg) { return model_layout(cfg).total_count(); }

ParamStore<float> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  return init_params(model_layout(cfg), seed);
}

template <typename T>
std::vector<Tensor<T>> encoder_forward(const Tensor<T>& image, const ModelConfig& cfg, const ParamStore<T>& params) {
  if (image.rank() != 4 || image.dim(1) != cfg.input_channels) {
    throw ShapeError("encoder expects [B," + std::to_string(cfg.input_channels) + ",H,W], got " +
                     shape_str(image.shape()));
  }
  if (image.dim(2) % kInputMultiple != 0 || image.dim(3) % kInputMultiple != 0) {
    throw ShapeError("encoder input " + shape_str(image.shape()) + " is not a multiple of 32; pad first");
  }
  std::vector<Tensor<T>> features;
  Tensor<T> x = image;
  for (int s = 0; s < kStages; ++s) {
    const auto p = stage_prefix(s);
    auto emb = filtered_embed(x, cfg.embed(s), params, p + ".embed", cfg.filtering);
    auto tokens = emb.tokens;
    const auto block = cfg.block(s);
    for (int d = 0; d < cfg.stage_depths[s]; ++d) {
      tokens = mdt_block(tokens, emb.height, emb.width, block, params, p + ".block" + std::to_string(d + 1));
    }
    x = to_map(tokens, emb.height, emb.width);
    features.push_back(x);
  }
  return features;
}

template <typename T>
Tensor<T> mlp_decoder(const std::vector<Tensor<T>>& features, const ModelConfig& cfg, const ParamStore<T>& params,
                      std::int64_t out_h, std::int64_t out_w) {
  if (features.size() != kStages) throw ShapeError("decoder expects 4 feature maps");
  const auto h = features[0].dim(2), w = features[0].dim(3);
  std::vector<Tensor<T>> projected;
  for (int s = 0; s < kStages; ++s) {
    const auto& f = features[static_cast<std::size_t>(s)];
    if (f.rank() != 4 || f.dim(1) != cfg.stage_channels[s] || f.dim(0) != features[0].dim(0)) {
      throw ShapeError("decoder feature " + std::to_string(s + 1) + " has shape " + shape_str(f.shape()));
    }
    const auto name = "decoder.proj" + std::to_string(s + 1);
    auto t = ops::linear(to_tokens(f), params.get(name + ".weight"), params.get(name + ".bias"));
    auto m = to_map(t, f.dim(2), f.dim(3));
    if (f.dim(2) != h || f.dim(3) != w) m = ops::bilinear_resize(m, h, w);
    projected.push_back(m);
  }
  auto fused = to_tokens(ops::concat(projected, 1));
  fused = ops::gelu(ops::linear(fused, params.get("decoder.fuse.weight"), params.get("decoder.fuse.bias")));
  auto logits = ops::linear(fused, params.get("decoder.head.weight"), params.get("decoder.head.bias"));
  auto map = to_map(logits, h, w);
  if (h == out_h && w == out_w) return map;
  return ops::bilinear_resize(map, out_h, out_w);
}

template <typename T>
Tensor<T> pad_to_multiple(const Tensor<T>& image, std::int64_t multiple) {
  Tensor<T> x = image;
  std::int64_t need_h = (multiple - x.dim(2) % multiple) % multiple;
  std::int64_t need_w = (multiple - x.dim(3) % multiple) % multiple;
  while (need_h > 0 || need_w > 0) {
    if ((need_h > 0 && x.dim(2) < 2) || (need_w > 0 && x.dim(3) < 2)) {
      throw ShapeError("cannot reflect-pad an extent of 1: " + shape_str(image.shape()));
    }
    const auto ph = std::min(need_h, x.dim(2) - 1);
    const auto pw = std::min(need_w, x.dim(3) - 1);
    x = ops::pad2d(x, 0, ph, 0, pw, ops::PadMode::kReflect);
    need_h -= ph;
    need_w -= pw;
  }
  return x;
}

template <typename T>
Tensor<T> model_forward(const Tensor<T>& image, const ModelConfig& cfg, const ParamStore<T>& params) {
  if (image.rank() != 4) throw ShapeError("model expects [B,C,H,W], got " + shape_str(image.shape()));
  const auto h = image.dim(2), w = image.dim(3);
  auto padded = pad_to_multiple(image, kInputMultiple);
  auto logits = mlp_decoder(encoder_forward(padded, cfg, params), cfg, params, padded.dim(2), padded.dim(3));
  if (padded.dim(2) != h) logits = ops::slice(logits, 2, 0, h);
  if (padded.dim(3) != w) logits = ops::slice(logits, 3, 0, w);
  return logits;
}

#define MDTAF_INST(T)                                                                                            \
  template std::vector<Tensor<T>> encoder_forward<T>(const Tensor<T>&, const ModelConfig&, const ParamStore<T>&); \
  template Tensor<T> mlp_decoder<T>(const std::vector<Tensor<T>>&, const ModelConfig&, const ParamStore<T>&,     \
                                    std::int64_t, std::int64_t);                                                 \
  template Tensor<T> pad_to_multiple<T>(const Tensor<T>&, std::int64_t);                                         \
  template Tensor<T> model_forward<T>(const Tensor<T>&, const ModelConfig&, const ParamStore<T>&);
MDTAF_INSTANTIATE_FLOATING(MDTAF_INST)
#undef MDTAF_INST

}  // namespace mdtaf
