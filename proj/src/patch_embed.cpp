#include "mdtaf/patch_embed.hpp"

#include "mdtaf/ops.hpp"
#include "ops_internal.hpp"

namespace mdtaf {

namespace {

template <typename T>
const Tensor<T>& param(const ParamStore<T>& params, const std::string& prefix, const char* name) {
  return params.get(prefix + "." + name);
}

template <typename T>
Tensor<T> conv(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix, ops::Conv2dOptions opt) {
  return ops::conv2d(x, params.get(prefix + ".weight"), params.get(prefix + ".bias"), opt);
}

// Channel layer norm (axis 1 of NCHW) followed by GELU.
template <typename T>
Tensor<T> norm_act(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix) {
  return ops::gelu(ops::layer_norm(x, 1, params.get(prefix + ".weight"), params.get(prefix + ".bias")));
}

}  // namespace

void declare_hourglass_params(ParamLayout& layout, const std::string& prefix) {
  const std::int64_t c = kFilterChannels;
  const std::int64_t hc = kHourglassChannels;
  layout.add_weight_bias(prefix + ".down1", {hc, c, 3, 3}, hc);
  layout.add_norm(prefix + ".down1_norm", hc);
  layout.add_weight_bias(prefix + ".down2", {hc, hc, 3, 3}, hc);
  layout.add_norm(prefix + ".down2_norm", hc);
  layout.add_weight_bias(prefix + ".up1", {hc, hc, 4, 4}, hc);
  layout.add_norm(prefix + ".up1_norm", hc);
  layout.add_weight_bias(prefix + ".up2", {hc, c, 4, 4}, c);
  layout.add_weight_bias(prefix + ".skip", {c, c, 1, 1}, c);
}

void declare_patch_embed_params(ParamLayout& layout, const std::string& prefix, const PatchEmbedConfig& cfg,
                                bool filtering) {
  const std::int64_t cin = cfg.in_channels;
  const std::int64_t cout = cfg.out_channels;
  layout.add_weight_bias(prefix + ".proj", {cout, cin, cfg.kernel, cfg.kernel}, cout);
  layout.add_norm(prefix + ".norm", cout);
  if (!filtering) return;
  const std::string f = prefix + ".filter";
  const std::int64_t c = kFilterChannels;
  layout.add_weight_bias(f + ".entry", {c, cin, 1, 1}, c);
  layout.add_weight_bias(f + ".group", {c, 1, 3, 3}, c);
  for (int level = 0; level < 3; ++level) {
    const std::int64_t n = kPyramidSplit[level];
    layout.add_weight_bias(f + ".level" + std::to_string(level + 1), {n, n, 3, 3}, n);
  }
  layout.add_weight_bias(f + ".reg1", {c, c, 3, 3}, c);
  layout.add_norm(f + ".reg1_norm", c);
  layout.add_weight_bias(f + ".reg2", {c, c, 3, 3}, c);
  layout.add_norm(f + ".reg2_norm", c);
  declare_hourglass_params(layout, f + ".hourglass");
  layout.add_weight_bias(f + ".compress", {1, c, 1, 1}, 1);
}

template <typename T>
Tensor<T> overlap_patch_embed(const Tensor<T>& x, const PatchEmbedConfig& cfg, const ParamStore<T>& params,
                              const std::string& prefix) {
  if (x.rank() != 4 || x.dim(1) != cfg.in_channels) {
    throw ShapeError("patch embed " + prefix + " expects [B," + std::to_string(cfg.in_channels) + ",H,W], got " +
                     shape_str(x.shape()));
  }
  auto f1 = conv(x, params, prefix + ".proj", {.stride = cfg.stride, .padding = cfg.padding});
  return ops::layer_norm(f1, 1, param(params, prefix, "norm.weight"), param(params, prefix, "norm.bias"));
}

template <typename T>
Tensor<T> dilated_pyramid(const Tensor<T>& x_gwc, const ParamStore<T>& params, const std::string& prefix) {
  if (x_gwc.rank() != 4 || x_gwc.dim(1) != kFilterChannels) {
    throw ShapeError("dilated_pyramid expects [B,40,h,w], got " + shape_str(x_gwc.shape()));
  }
  std::vector<Tensor<T>> levels;
  std::int64_t start = 0;
  for (int level = 0; level < 3; ++level) {
    const std::int64_t end = start + kPyramidSplit[level];
    const int d = kPyramidDilation[level];
    auto part = ops::slice(x_gwc, 1, start, end);
    levels.push_back(conv(part, params, prefix + ".level" + std::to_string(level + 1), {.padding = d, .dilation = d}));
    start = end;
  }
  return ops::concat(levels, 1);
}

template <typename T>
Tensor<T> hourglass2d(const Tensor<T>& v, const ParamStore<T>& params, const std::string& prefix) {
  if (v.rank() != 4 || v.dim(1) != kFilterChannels) {
    throw ShapeError("hourglass2d expects [B,40,h,w], got " + shape_str(v.shape()));
  }
  if (v.dim(2) % 4 != 0 || v.dim(3) % 4 != 0) {
    throw ContractError("hourglass2d needs spatial extents divisible by 4, got " + shape_str(v.shape()));
  }
  auto d1 = norm_act(conv(v, params, prefix + ".down1", {.stride = 2, .padding = 1}), params, prefix + ".down1_norm");
  auto d2 = norm_act(conv(d1, params, prefix + ".down2", {.stride = 2, .padding = 1}), params, prefix + ".down2_norm");
  auto u1 = ops::conv_transpose2d(d2, param(params, prefix, "up1.weight"), param(params, prefix, "up1.bias"), 2, 1);
  u1 = ops::add(norm_act(u1, params, prefix + ".up1_norm"), d1);
  auto out = ops::conv_transpose2d(u1, param(params, prefix, "up2.weight"), param(params, prefix, "up2.bias"), 2, 1);
  return ops::add(out, conv(v, params, prefix + ".skip", {}));
}

template <typename T>
Tensor<T> attention_weights(const Tensor<T>& x, const PatchEmbedConfig& cfg, const ParamStore<T>& params,
                            const std::string& prefix) {
  const std::string f = prefix + ".filter";
  auto x_r = conv(x, params, f + ".entry", {.stride = cfg.stride});
  auto x_gwc = conv(x_r, params, f + ".group", {.padding = 1, .groups = kFilterChannels});
  auto v = dilated_pyramid(x_gwc, params, f);
  v = norm_act(conv(v, params, f + ".reg1", {.padding = 1}), params, f + ".reg1_norm");
  v = norm_act(conv(v, params, f + ".reg2", {.padding = 1}), params, f + ".reg2_norm");

  // Zero-pad to the hourglass granularity and crop back.
  const std::int64_t h = v.dim(2);
  const std::int64_t w = v.dim(3);
  const std::int64_t pad_h = (4 - h % 4) % 4;
  const std::int64_t pad_w = (4 - w % 4) % 4;
  if (pad_h || pad_w) v = ops::pad2d(v, 0, pad_h, 0, pad_w, ops::PadMode::kZero);
  v = hourglass2d(v, params, f + ".hourglass");
  if (pad_h) v = ops::slice(v, 2, 0, h);
  if (pad_w) v = ops::slice(v, 3, 0, w);

  return ops::sigmoid(conv(v, params, f + ".compress", {}));
}

template <typename T>
Tensor<T> to_tokens(const Tensor<T>& map) {
  if (map.rank() != 4) throw ShapeError("to_tokens expects NCHW, got " + shape_str(map.shape()));
  auto flat = ops::reshape(map, {map.dim(0), map.dim(1), map.dim(2) * map.dim(3)});
  return ops::permute(flat, {0, 2, 1});
}

template <typename T>
Tensor<T> to_map(const Tensor<T>& tokens, std::int64_t h, std::int64_t w) {
  if (tokens.rank() != 3 || tokens.dim(1) != h * w) {
    throw ShapeError("to_map: tokens " + shape_str(tokens.shape()) + " do not hold a " + std::to_string(h) + "x" +
                     std::to_string(w) + " grid");
  }
  auto chw = ops::permute(tokens, {0, 2, 1});
  return ops::reshape(chw, {tokens.dim(0), tokens.dim(2), h, w});
}

template <typename T>
EmbeddedTokens<T> filtered_embed(const Tensor<T>& x, const PatchEmbedConfig& cfg, const ParamStore<T>& params,
                                 const std::string& prefix, bool filtering) {
  auto f1 = overlap_patch_embed(x, cfg, params, prefix);
  if (filtering) {
    auto gate = attention_weights(x, cfg, params, prefix);
    if (gate.dim(2) != f1.dim(2) || gate.dim(3) != f1.dim(3)) {
      throw ShapeError("attention weights " + shape_str(gate.shape()) + " misaligned with embedding " +
                       shape_str(f1.shape()));
    }
    f1 = ops::mul(gate, f1);
  }
  return {to_tokens(f1), f1.dim(2), f1.dim(3)};
}

#define MDTAF_INST(T)                                                                                           \
  template Tensor<T> overlap_patch_embed<T>(const Tensor<T>&, const PatchEmbedConfig&, const ParamStore<T>&,   \
                                            const std::string&);                                               \
  template Tensor<T> dilated_pyramid<T>(const Tensor<T>&, const ParamStore<T>&, const std::string&);           \
  template Tensor<T> hourglass2d<T>(const Tensor<T>&, const ParamStore<T>&, const std::string&);               \
  template Tensor<T> attention_weights<T>(const Tensor<T>&, const PatchEmbedConfig&, const ParamStore<T>&,     \
                                          const std::string&);                                                 \
  template Tensor<T> to_tokens<T>(const Tensor<T>&);                                                           \
  template Tensor<T> to_map<T>(const Tensor<T>&, std::int64_t, std::int64_t);                                  \
  template EmbeddedTokens<T> filtered_embed<T>(const Tensor<T>&, const PatchEmbedConfig&, const ParamStore<T>&, \
                                               const std::string&, bool);
MDTAF_INSTANTIATE_FLOATING(MDTAF_INST)
#undef MDTAF_INST

}  // namespace mdtaf
