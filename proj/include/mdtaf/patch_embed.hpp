#pragma once

#include <cstdint>
#include <string>

#include "mdtaf/param_store.hpp"
#include "mdtaf/tensor.hpp"

namespace mdtaf {

// Overlapping patch embedding: a K x K conv with stride S and padding P.
struct PatchEmbedConfig {
  int kernel = 7;
  int stride = 4;
  int padding = 3;
  int in_channels = 3;
  int out_channels = 64;

  // K=7, S=4, P=3 for the first stage; K=3, S=2, P=1 afterwards.
  static PatchEmbedConfig first_stage(int in_channels, int out_channels) {
    return {7, 4, 3, in_channels, out_channels};
  }
  static PatchEmbedConfig later_stage(int in_channels, int out_channels) {
    return {3, 2, 1, in_channels, out_channels};
  }
};

// Fixed widths of the filtering branch.
inline constexpr int kFilterChannels = 40;
inline constexpr int kHourglassChannels = 64;
// Channel slices [0:8], [8:24], [24:40] go through dilations 1, 2, 3.
inline constexpr int kPyramidSplit[3] = {8, 16, 16};
inline constexpr int kPyramidDilation[3] = {1, 2, 3};

// Declares `prefix.proj`, `prefix.norm` and, when `filtering` is on, the
// `prefix.filter.*` branch.
void declare_patch_embed_params(ParamLayout& layout, const std::string& prefix, const PatchEmbedConfig& cfg,
                                bool filtering);
void declare_hourglass_params(ParamLayout& layout, const std::string& prefix);

// Strided conv followed by channel-wise layer norm: F1 as [B, Cout, H/S, W/S].
template <typename T>
Tensor<T> overlap_patch_embed(const Tensor<T>& x, const PatchEmbedConfig& cfg, const ParamStore<T>& params,
                              const std::string& prefix);

// Splits 40 channels into 8/16/16, applies 3x3 convs with dilation 1/2/3
// (padding = dilation) and concatenates in level order.
template <typename T>
Tensor<T> dilated_pyramid(const Tensor<T>& x_gwc, const ParamStore<T>& params, const std::string& prefix);

// Depth-2 hourglass 40 -> 64 -> 64 -> 64 -> 40. Requires h, w divisible by 4.
//   d1 = act(conv_s2(v)), d2 = act(conv_s2(d1))
//   u1 = act(deconv(d2)) + d1
//   out = deconv(u1) + conv1x1(v)
// where act = channel layer norm then GELU.
template <typename T>
Tensor<T> hourglass2d(const Tensor<T>& v, const ParamStore<T>& params, const std::string& prefix);

// Gate A in (0, 1) of shape [B, 1, H/S, W/S], aligned with F1.
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& x, const PatchEmbedConfig& cfg, const ParamStore<T>& params,
                            const std::string& prefix);

// [B, C, h, w] -> [B, h*w, C] (row-major over positions).
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& map);
// [B, h*w, C] -> [B, C, h, w].
template <typename T>
Tensor<T> to_map(const Tensor<T>& tokens, std::int64_t h, std::int64_t w);

template <typename T>
struct EmbeddedTokens {
  Tensor<T> tokens;  // [B, h*w, Cout]
  std::int64_t height = 0;
  std::int64_t width = 0;
};

// A * F1 with A broadcast over every channel, flattened into tokens.
// With filtering off the gate is skipped entirely.
template <typename T>
EmbeddedTokens<T> filtered_embed(const Tensor<T>& x, const PatchEmbedConfig& cfg, const ParamStore<T>& params,
                                 const std::string& prefix, bool filtering);

}  // namespace mdtaf
