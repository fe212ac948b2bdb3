#include "mdtaf/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mdtaf/ops.hpp"
#include "mdtaf/patch_embed.hpp"
#include "ops_internal.hpp"

namespace mdtaf {

namespace {

std::string str(std::int64_t v) { return std::to_string(v); }

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix, bool bias = true) {
  return ops::linear(x, params.get(prefix + ".weight"), bias ? params.get(prefix + ".bias") : Tensor<T>{});
}

template <typename T>
Tensor<T> conv1x1(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix) {
  return ops::conv2d(x, params.get(prefix + ".weight"), params.get(prefix + ".bias"), {});
}

// [B, N, C] -> [B, h, N, C/h]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& t, int heads) {
  const auto b = t.dim(0), n = t.dim(1), c = t.dim(2);
  return ops::permute(ops::reshape(t, {b, n, heads, c / heads}), {0, 2, 1, 3});
}

// [B, h, N, d] -> [B, N, h*d]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& t) {
  const auto b = t.dim(0), h = t.dim(1), n = t.dim(2), d = t.dim(3);
  return ops::reshape(ops::permute(t, {0, 2, 1, 3}), {b, n, h * d});
}

template <typename T>
void check_tokens(const char* op, const Tensor<T>& x, const AttentionConfig& cfg) {
  cfg.validate();
  if (x.rank() != 3 || x.dim(2) != cfg.channels) {
    throw ShapeError(std::string(op) + " expects [B,N," + str(cfg.channels) + "], got " + shape_str(x.shape()));
  }
}

template <typename T>
void check_grid(const char* op, const Tensor<T>& x, std::int64_t height, std::int64_t width) {
  if (x.dim(1) != height * width) {
    throw ShapeError(std::string(op) + ": " + str(x.dim(1)) + " tokens do not form a " + str(height) + "x" +
                     str(width) + " grid");
  }
}

// Row (query) i, column (key) j of a we x we window, looked up in a table
// sized for the configured window w.
std::vector<std::int64_t> relative_index(std::int64_t we, std::int64_t w) {
  const std::int64_t span = 2 * w - 1;
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(we * we * we * we));
  for (std::int64_t i = 0; i < we * we; ++i) {
    for (std::int64_t j = 0; j < we * we; ++j) {
      const std::int64_t dy = i / we - j / we + w - 1;
      const std::int64_t dx = i % we - j % we + w - 1;
      idx.push_back(dy * span + dx);
    }
  }
  return idx;
}

}  // namespace

void AttentionConfig::validate() const {
  if (channels <= 0 || heads <= 0 || reduction <= 0 || window <= 0 || r1 <= 0 || r2 <= 0) {
    throw ConfigError("attention settings must be positive");
  }
  if (channels % heads != 0) {
    throw ConfigError("channels " + str(channels) + " not divisible by heads " + str(heads));
  }
  if (channels % r1 != 0 || channels % r2 != 0) {
    throw ConfigError("channels " + str(channels) + " not divisible by gate ratios r1=" + str(r1) +
                      " r2=" + str(r2));
  }
}

void declare_esa_params(ParamLayout& layout, const std::string& prefix, const AttentionConfig& cfg) {
  const std::int64_t c = cfg.channels;
  for (const char* name : {".q", ".k", ".v"}) layout.add_weight_bias(prefix + name, {c, c}, c);
  layout.add_weight_bias(prefix + ".k_reduce", {c * cfg.reduction, c}, c);
  layout.add_weight_bias(prefix + ".v_reduce", {c * cfg.reduction, c}, c);
  layout.add_weight_bias(prefix + ".proj", {c, c}, c);
}

void declare_depthwise_params(ParamLayout& layout, const std::string& prefix, int channels) {
  layout.add_weight_bias(prefix, {channels, 1, 3, 3}, channels);
}

void declare_spatial_gate_params(ParamLayout& layout, const std::string& prefix, int channels, int r1) {
  const std::int64_t hidden = channels / r1;
  layout.add_weight_bias(prefix + ".fc1", {hidden, channels, 1, 1}, hidden);
  layout.add_weight_bias(prefix + ".fc2", {1, hidden, 1, 1}, 1);
}

void declare_channel_gate_params(ParamLayout& layout, const std::string& prefix, int channels, int r2) {
  const std::int64_t hidden = channels / r2;
  layout.add_weight_bias(prefix + ".fc1", {hidden, channels, 1, 1}, hidden);
  layout.add_weight_bias(prefix + ".fc2", {channels, hidden, 1, 1}, channels);
}

namespace {

void declare_fusion_tail(ParamLayout& layout, const std::string& prefix, const AttentionConfig& cfg) {
  const std::int64_t c = cfg.channels;
  layout.add_weight_bias(prefix + ".attn_merge", {c, c}, c);
  declare_depthwise_params(layout, prefix + ".local", cfg.channels);
  declare_spatial_gate_params(layout, prefix + ".gate_s", cfg.channels, cfg.r1);
  declare_channel_gate_params(layout, prefix + ".gate_c", cfg.channels, cfg.r2);
  layout.add_weight_bias(prefix + ".merge", {c, c}, c);
}

}  // namespace

void declare_ssa_params(ParamLayout& layout, const std::string& prefix, const AttentionConfig& cfg) {
  const std::int64_t c = cfg.channels;
  for (const char* name : {".q", ".k", ".v"}) layout.add(prefix + name + ".weight", {c, c}, InitKind::kTruncNormal);
  const std::int64_t span = 2 * cfg.window - 1;
  layout.add(prefix + ".rel_pos_bias", {span * span, cfg.heads}, InitKind::kZeros);
  declare_fusion_tail(layout, prefix, cfg);
}

void declare_csa_params(ParamLayout& layout, const std::string& prefix, const AttentionConfig& cfg) {
  const std::int64_t c = cfg.channels;
  for (const char* name : {".q", ".k", ".v"}) layout.add(prefix + name + ".weight", {c, c}, InitKind::kTruncNormal);
  layout.add(prefix + ".alpha", {cfg.heads}, InitKind::kOnes);
  declare_fusion_tail(layout, prefix, cfg);
}

void declare_block_params(ParamLayout& layout, const std::string& prefix, const BlockConfig& cfg) {
  cfg.attn.validate();
  const std::int64_t c = cfg.attn.channels;
  const std::int64_t hidden = c * cfg.mlp_ratio;
  layout.add_norm(prefix + ".norm1", c);
  declare_esa_params(layout, prefix + ".esa", cfg.attn);
  if (cfg.msa) {
    declare_ssa_params(layout, prefix + ".ssa", cfg.attn);
    declare_csa_params(layout, prefix + ".csa", cfg.attn);
  }
  layout.add_norm(prefix + ".norm2", c);
  layout.add_weight_bias(prefix + ".mlp.fc1", {c, hidden}, hidden);
  layout.add_weight_bias(prefix + ".mlp.fc2", {hidden, c}, c);
}

std::int64_t effective_window(std::int64_t height, std::int64_t width, std::int64_t window) {
  if (height <= 0 || width <= 0 || window <= 0) throw ShapeError("effective_window: extents must be positive");
  const std::int64_t g = std::gcd(height, width);
  for (std::int64_t w = std::min(g, window); w > 1; --w) {
    if (g % w == 0) return w;
  }
  return 1;
}

template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, std::int64_t w) {
  if (x.rank() != 4) throw ShapeError("window_partition expects [B,H,W,C], got " + shape_str(x.shape()));
  const auto b = x.dim(0), h = x.dim(1), wd = x.dim(2), c = x.dim(3);
  if (w <= 0 || h % w != 0 || wd % w != 0) {
    throw ContractError("window " + str(w) + " does not tile a " + str(h) + "x" + str(wd) + " grid");
  }
  auto t = ops::reshape(x, {b, h / w, w, wd / w, w, c});
  t = ops::permute(t, {0, 1, 3, 2, 4, 5});
  return ops::reshape(t, {b * (h / w) * (wd / w), w * w, c});
}

template <typename T>
Tensor<T> window_merge(const Tensor<T>& windows, std::int64_t batch, std::int64_t height, std::int64_t width,
                       std::int64_t w) {
  if (w <= 0 || height % w != 0 || width % w != 0) {
    throw ContractError("window " + str(w) + " does not tile a " + str(height) + "x" + str(width) + " grid");
  }
  const auto nh = height / w, nw = width / w;
  if (windows.rank() != 3 || windows.dim(0) != batch * nh * nw || windows.dim(1) != w * w) {
    throw ShapeError("window_merge: unexpected windows " + shape_str(windows.shape()));
  }
  const auto c = windows.dim(2);
  auto t = ops::reshape(windows, {batch, nh, nw, w, w, c});
  t = ops::permute(t, {0, 1, 3, 2, 4, 5});
  return ops::reshape(t, {batch, height, width, c});
}

template <typename T>
Tensor<T> depthwise_local(const Tensor<T>& f, const ParamStore<T>& params, const std::string& prefix) {
  if (f.rank() != 4) throw ShapeError("depthwise_local expects NCHW, got " + shape_str(f.shape()));
  const int c = static_cast<int>(f.dim(1));
  auto y = ops::conv2d(f, params.get(prefix + ".weight"), params.get(prefix + ".bias"), {.padding = 1, .groups = c});
  return ops::gelu(y);
}

template <typename T>
Tensor<T> interact_spatial(const Tensor<T>& x1, const Tensor<T>& x2, const ParamStore<T>& params,
                           const std::string& prefix) {
  if (x1.shape() != x2.shape()) {
    throw ShapeError("interact_spatial: " + shape_str(x1.shape()) + " vs " + shape_str(x2.shape()));
  }
  auto g = ops::gelu(conv1x1(x2, params, prefix + ".fc1"));
  g = ops::sigmoid(conv1x1(g, params, prefix + ".fc2"));  // [B,1,H,W]
  return ops::mul(x1, g);
}

template <typename T>
Tensor<T> interact_channel(const Tensor<T>& x1, const Tensor<T>& x2, const ParamStore<T>& params,
                           const std::string& prefix) {
  if (x1.shape() != x2.shape()) {
    throw ShapeError("interact_channel: " + shape_str(x1.shape()) + " vs " + shape_str(x2.shape()));
  }
  auto g = ops::gelu(conv1x1(ops::global_avg_pool(x2), params, prefix + ".fc1"));
  g = ops::sigmoid(conv1x1(g, params, prefix + ".fc2"));  // [B,C,1,1]
  return ops::mul(x1, g);
}

template <typename T>
Tensor<T> esa_branch(const Tensor<T>& x, const AttentionConfig& cfg, const ParamStore<T>& params,
                     const std::string& prefix, AttentionTrace<T>* trace) {
  check_tokens("efficient_self_attention", x, cfg);
  const auto b = x.dim(0), n = x.dim(1);
  const std::int64_t c = cfg.channels, r = cfg.reduction;
  if (n % r != 0) throw ConfigError("token count " + str(n) + " not divisible by reduction ratio " + str(r));

  auto reduce = [&](const std::string& proj, const std::string& red) {
    auto t = ops::reshape(dense(x, params, prefix + proj), {b, n / r, c * r});
    return split_heads(dense(t, params, prefix + red), cfg.heads);
  };
  auto q = split_heads(dense(x, params, prefix + ".q"), cfg.heads);
  auto k = reduce(".k", ".k_reduce");
  auto v = reduce(".v", ".v_reduce");

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  auto probs = ops::softmax(ops::scale(ops::matmul_batched(q, ops::transpose(k, -1, -2)), inv_sqrt_d), -1);
  if (trace) trace->esa_probs = probs;
  return dense(merge_heads(ops::matmul_batched(probs, v)), params, prefix + ".proj");
}

template <typename T>
Tensor<T> ssa_branch(const Tensor<T>& x, std::int64_t height, std::int64_t width, const AttentionConfig& cfg,
                     const ParamStore<T>& params, const std::string& prefix, AttentionTrace<T>* trace) {
  check_tokens("spatial_self_attention", x, cfg);
  check_grid("spatial_self_attention", x, height, width);
  const auto b = x.dim(0);
  const std::int64_t c = cfg.channels;
  const std::int64_t we = effective_window(height, width, cfg.window);

  auto windowed = [&](const std::string& name) {
    auto t = ops::reshape(dense(x, params, prefix + name, false), {b, height, width, c});
    return split_heads(window_partition(t, we), cfg.heads);  // [B*nw, h, we*we, d]
  };
  auto q = windowed(".q");
  auto k = windowed(".k");
  auto v = windowed(".v");

  auto bias = ops::index_select(params.get(prefix + ".rel_pos_bias"), relative_index(we, cfg.window));
  bias = ops::permute(ops::reshape(bias, {we * we, we * we, cfg.heads}), {2, 0, 1});

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  auto scores = ops::scale(ops::matmul_batched(q, ops::transpose(k, -1, -2)), inv_sqrt_d);
  auto probs = ops::softmax(ops::add(scores, bias), -1);
  if (trace) trace->ssa_probs = probs;

  auto o = window_merge(merge_heads(ops::matmul_batched(probs, v)), b, height, width, we);
  auto y_sp = dense(ops::reshape(o, {b, height * width, c}), params, prefix + ".attn_merge");
  if (trace) trace->y_sp = y_sp;

  auto local = depthwise_local(to_map(x, height, width), params, prefix + ".local");
  auto sp = to_map(y_sp, height, width);
  auto fused = ops::add(interact_channel(sp, local, params, prefix + ".gate_c"),
                        interact_spatial(local, sp, params, prefix + ".gate_s"));
  return dense(to_tokens(fused), params, prefix + ".merge");
}

template <typename T>
Tensor<T> csa_branch(const Tensor<T>& x, std::int64_t height, std::int64_t width, const AttentionConfig& cfg,
                     const ParamStore<T>& params, const std::string& prefix, AttentionTrace<T>* trace) {
  check_tokens("channel_self_attention", x, cfg);
  check_grid("channel_self_attention", x, height, width);
  auto q = split_heads(dense(x, params, prefix + ".q", false), cfg.heads);  // [B,h,N,d]
  auto k = split_heads(dense(x, params, prefix + ".k", false), cfg.heads);
  auto v = split_heads(dense(x, params, prefix + ".v", false), cfg.heads);

  auto gram = ops::matmul_batched(ops::transpose(q, -1, -2), k);  // [B,h,d,d]
  auto alpha = ops::reshape(params.get(prefix + ".alpha"), {1, cfg.heads, 1, 1});
  auto probs = ops::softmax(ops::div(gram, alpha), -1);
  if (trace) trace->csa_probs = probs;

  auto y_ch = dense(merge_heads(ops::matmul_batched(v, probs)), params, prefix + ".attn_merge");
  if (trace) trace->y_ch = y_ch;

  auto local = depthwise_local(to_map(x, height, width), params, prefix + ".local");
  auto ch = to_map(y_ch, height, width);
  auto fused = ops::add(interact_spatial(ch, local, params, prefix + ".gate_s"),
                        interact_channel(local, ch, params, prefix + ".gate_c"));
  return dense(to_tokens(fused), params, prefix + ".merge");
}

template <typename T>
Tensor<T> efficient_self_attention(const Tensor<T>& x, const AttentionConfig& cfg, const ParamStore<T>& params,
                                   const std::string& prefix, AttentionTrace<T>* trace) {
  return ops::add(esa_branch(x, cfg, params, prefix, trace), x);
}

template <typename T>
Tensor<T> spatial_self_attention(const Tensor<T>& x, std::int64_t height, std::int64_t width,
                                 const AttentionConfig& cfg, const ParamStore<T>& params, const std::string& prefix,
                                 AttentionTrace<T>* trace) {
  return ops::add(ssa_branch(x, height, width, cfg, params, prefix, trace), x);
}

template <typename T>
Tensor<T> channel_self_attention(const Tensor<T>& x, std::int64_t height, std::int64_t width,
                                 const AttentionConfig& cfg, const ParamStore<T>& params, const std::string& prefix,
                                 AttentionTrace<T>* trace) {
  return ops::add(csa_branch(x, height, width, cfg, params, prefix, trace), x);
}

template <typename T>
Tensor<T> fuse_branches(const Tensor<T>& y_e, const Tensor<T>& y_s, const Tensor<T>& y_c, double lambda1,
                        double lambda2) {
  return ops::add(y_e, ops::add(ops::scale(y_s, lambda1), ops::scale(y_c, lambda2)));
}

template <typename T>
Tensor<T> mdt_block(const Tensor<T>& x, std::int64_t height, std::int64_t width, const BlockConfig& cfg,
                    const ParamStore<T>& params, const std::string& prefix, AttentionTrace<T>* trace) {
  auto xn = ops::layer_norm(x, -1, params.get(prefix + ".norm1.weight"), params.get(prefix + ".norm1.bias"));
  auto z = ops::add(esa_branch(xn, cfg.attn, params, prefix + ".esa", trace), x);
  if (cfg.msa) {
    auto y_s = ops::add(ssa_branch(xn, height, width, cfg.attn, params, prefix + ".ssa", trace), x);
    auto y_c = ops::add(csa_branch(xn, height, width, cfg.attn, params, prefix + ".csa", trace), x);
    z = fuse_branches(z, y_s, y_c, cfg.lambda1, cfg.lambda2);
  }
  if (trace) trace->z = z;
  auto m = ops::layer_norm(z, -1, params.get(prefix + ".norm2.weight"), params.get(prefix + ".norm2.bias"));
  m = dense(ops::gelu(dense(m, params, prefix + ".mlp.fc1")), params, prefix + ".mlp.fc2");
  return cfg.skip_mlp_residual ? m : ops::add(m, z);
}

template <typename T>
void clamp_temperatures(ParamStore<T>& params) {
  const std::string suffix = ".alpha";
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.names()[i];
    if (name.size() < suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) continue;
    for (auto& a : params.tensors()[i].mutable_data()) a = std::max(a, static_cast<T>(kAlphaFloor));
  }
}

#define MDTAF_INST(T)                                                                                             \
  template Tensor<T> window_partition<T>(const Tensor<T>&, std::int64_t);                                        \
  template Tensor<T> window_merge<T>(const Tensor<T>&, std::int64_t, std::int64_t, std::int64_t, std::int64_t);  \
  template Tensor<T> depthwise_local<T>(const Tensor<T>&, const ParamStore<T>&, const std::string&);             \
  template Tensor<T> interact_spatial<T>(const Tensor<T>&, const Tensor<T>&, const ParamStore<T>&,               \
                                         const std::string&);                                                    \
  template Tensor<T> interact_channel<T>(const Tensor<T>&, const Tensor<T>&, const ParamStore<T>&,               \
                                         const std::string&);                                                    \
  template Tensor<T> esa_branch<T>(const Tensor<T>&, const AttentionConfig&, const ParamStore<T>&,               \
                                   const std::string&, AttentionTrace<T>*);                                      \
  template Tensor<T> ssa_branch<T>(const Tensor<T>&, std::int64_t, std::int64_t, const AttentionConfig&,         \
                                   const ParamStore<T>&, const std::string&, AttentionTrace<T>*);                \
  template Tensor<T> csa_branch<T>(const Tensor<T>&, std::int64_t, std::int64_t, const AttentionConfig&,         \
                                   const ParamStore<T>&, const std::string&, AttentionTrace<T>*);                \
  template Tensor<T> efficient_self_attention<T>(const Tensor<T>&, const AttentionConfig&, const ParamStore<T>&, \
                                                 const std::string&, AttentionTrace<T>*);                        \
  template Tensor<T> spatial_self_attention<T>(const Tensor<T>&, std::int64_t, std::int64_t,                     \
                                               const AttentionConfig&, const ParamStore<T>&, const std::string&, \
                                               AttentionTrace<T>*);                                              \
  template Tensor<T> channel_self_attention<T>(const Tensor<T>&, std::int64_t, std::int64_t,                     \
                                               const AttentionConfig&, const ParamStore<T>&, const std::string&, \
                                               AttentionTrace<T>*);                                              \
  template Tensor<T> fuse_branches<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double, double);     \
  template Tensor<T> mdt_block<T>(const Tensor<T>&, std::int64_t, std::int64_t, const BlockConfig&,              \
                                  const ParamStore<T>&, const std::string&, AttentionTrace<T>*);                 \
  template void clamp_temperatures<T>(ParamStore<T>&);
MDTAF_INSTANTIATE_FLOATING(MDTAF_INST)
#undef MDTAF_INST

}  // namespace mdtaf
