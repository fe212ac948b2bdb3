#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "mdtaf/attention.hpp"
#include "mdtaf/param_store.hpp"
#include "mdtaf/patch_embed.hpp"
#include "mdtaf/tensor.hpp"

namespace mdtaf {

inline constexpr int kStages = 4;
// Every input is padded to a multiple of the deepest feature stride.
inline constexpr int kInputMultiple = 32;

struct ModelConfig {
  int input_channels = 3;
  std::array<int, kStages> stage_channels{64, 128, 320, 512};
  std::array<int, kStages> stage_depths{2, 2, 2, 2};
  std::array<int, kStages> heads{1, 2, 5, 8};
  std::array<int, kStages> reductions{8, 4, 2, 1};
  int window = 8;
  int r1 = 8;
  int r2 = 8;
  int mlp_ratio = 4;
  int decoder_embed_dim = 256;
  int num_classes = 1;
  bool filtering = true;
  bool msa = true;
  bool skip_mlp_residual = false;
  std::uint64_t seed = 0;

  // The reduced CPU preset: channels [16,32,40,64], depths 1, decoder 64.
  static ModelConfig desk();

  // Throws ConfigError naming the first inconsistent field.
  void validate() const;
  PatchEmbedConfig embed(int stage) const;
  BlockConfig block(int stage) const;
  // Feature stride of stage i (0-based): 4, 8, 16, 32.
  static int stride(int stage) { return 4 << stage; }
};

nlohmann::json to_json(const ModelConfig& cfg);
// Missing keys keep their defaults; unknown keys and bad types raise ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

// Names: stage{i}.embed.*, stage{i}.block{j}.*, decoder.*.
ParamLayout model_layout(const ModelConfig& cfg);
std::int64_t param_count(const ModelConfig& cfg);
ParamStore<float> init_params(const ModelConfig& cfg, std::uint64_t seed);

// Four NCHW maps at strides 4/8/16/32. H and W must already be multiples of 32.
template <typename T>
std::vector<Tensor<T>> encoder_forward(const Tensor<T>& image, const ModelConfig& cfg, const ParamStore<T>& params);

// Per-stage linear to the embed dim, bilinear to the stride-4 grid, concat in
// stage order, linear + GELU, linear to classes, bilinear to out_h x out_w.
template <typename T>
Tensor<T> mlp_decoder(const std::vector<Tensor<T>>& features, const ModelConfig& cfg, const ParamStore<T>& params,
                      std::int64_t out_h, std::int64_t out_w);

// Reflect-pads H and W up to multiples of 32, runs encoder and decoder and
// crops the logits back to [B, num_classes, H, W].
template <typename T>
Tensor<T> model_forward(const Tensor<T>& image, const ModelConfig& cfg, const ParamStore<T>& params);

// Reflect padding on the bottom/right edges, repeated when the pad exceeds
// what a single reflection can supply.
template <typename T>
Tensor<T> pad_to_multiple(const Tensor<T>& image, std::int64_t multiple);

}  // namespace mdtaf
