#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdtaf/param_store.hpp"
#include "mdtaf/tensor.hpp"

namespace mdtaf {

struct AttentionConfig {
  int channels = 64;
  int heads = 1;
  int reduction = 8;  // ESA spatial reduction R
  int window = 8;     // SSA window size w
  int r1 = 8;         // spatial gate squeeze ratio
  int r2 = 8;         // channel gate squeeze ratio

  int head_dim() const { return channels / heads; }
  // Throws ConfigError on C % h, C % r1, C % r2 violations.
  void validate() const;
};

struct BlockConfig {
  AttentionConfig attn;
  double lambda1 = 0.6;
  double lambda2 = 0.4;
  int mlp_ratio = 4;
  bool msa = true;            // false: ESA + MLP only
  bool skip_mlp_residual = false;  // true: no residual around the MLP
};

// Lower bound applied to every CSA temperature after an optimizer step.
inline constexpr double kAlphaFloor = 1e-4;

// Optional taps into intermediate results, for tests and diagnostics.
template <typename T>
struct AttentionTrace {
  Tensor<T> esa_probs;  // [B, h, N, N/R]
  Tensor<T> ssa_probs;  // [B*windows, h, w*w, w*w]
  Tensor<T> csa_probs;  // [B, h, d, d]
  Tensor<T> y_sp;       // SSA attention path after its merge, [B, N, C]
  Tensor<T> y_ch;       // CSA attention path after its merge, [B, N, C]
  Tensor<T> z;          // fused branches before the MLP
};

void declare_esa_params(ParamLayout& layout, const std::string& prefix, const AttentionConfig& cfg);
void declare_depthwise_params(ParamLayout& layout, const std::string& prefix, int channels);
void declare_spatial_gate_params(ParamLayout& layout, const std::string& prefix, int channels, int r1);
void declare_channel_gate_params(ParamLayout& layout, const std::string& prefix, int channels, int r2);
void declare_ssa_params(ParamLayout& layout, const std::string& prefix, const AttentionConfig& cfg);
void declare_csa_params(ParamLayout& layout, const std::string& prefix, const AttentionConfig& cfg);
void declare_block_params(ParamLayout& layout, const std::string& prefix, const BlockConfig& cfg);

// Largest divisor of gcd(H, W) not above `window`: the window SSA actually uses
// when the grid is not a multiple of the configured size.
std::int64_t effective_window(std::int64_t height, std::int64_t width, std::int64_t window);

// [B,H,W,C] -> [B*(H/w)*(W/w), w*w, C], windows in row-major grid order.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, std::int64_t w);
// Exact inverse of window_partition.
template <typename T>
Tensor<T> window_merge(const Tensor<T>& windows, std::int64_t batch, std::int64_t height, std::int64_t width,
                       std::int64_t w);

// 3x3 depthwise conv (pad 1) + GELU on NCHW.
template <typename T>
Tensor<T> depthwise_local(const Tensor<T>& f, const ParamStore<T>& params, const std::string& prefix);

// x1 * sigmoid(conv1x1(GELU(conv1x1(x2)))) with a single-channel gate.
template <typename T>
Tensor<T> interact_spatial(const Tensor<T>& x1, const Tensor<T>& x2, const ParamStore<T>& params,
                           const std::string& prefix);
// x1 * sigmoid(conv1x1(GELU(conv1x1(GAP(x2))))) with a per-channel gate.
template <typename T>
Tensor<T> interact_channel(const Tensor<T>& x1, const Tensor<T>& x2, const ParamStore<T>& params,
                           const std::string& prefix);

// Branch outputs without the residual. The public ops below add it back.
template <typename T>
Tensor<T> esa_branch(const Tensor<T>& x, const AttentionConfig& cfg, const ParamStore<T>& params,
                     const std::string& prefix, AttentionTrace<T>* trace = nullptr);
template <typename T>
Tensor<T> ssa_branch(const Tensor<T>& x, std::int64_t height, std::int64_t width, const AttentionConfig& cfg,
                     const ParamStore<T>& params, const std::string& prefix, AttentionTrace<T>* trace = nullptr);
template <typename T>
Tensor<T> csa_branch(const Tensor<T>& x, std::int64_t height, std::int64_t width, const AttentionConfig& cfg,
                     const ParamStore<T>& params, const std::string& prefix, AttentionTrace<T>* trace = nullptr);

// Reduced-key attention plus residual. N must be divisible by R.
template <typename T>
Tensor<T> efficient_self_attention(const Tensor<T>& x, const AttentionConfig& cfg, const ParamStore<T>& params,
                                   const std::string& prefix, AttentionTrace<T>* trace = nullptr);
// Windowed attention fused with the local conv branch, plus residual.
template <typename T>
Tensor<T> spatial_self_attention(const Tensor<T>& x, std::int64_t height, std::int64_t width,
                                 const AttentionConfig& cfg, const ParamStore<T>& params, const std::string& prefix,
                                 AttentionTrace<T>* trace = nullptr);
// Channel-by-channel attention fused with the local conv branch, plus residual.
template <typename T>
Tensor<T> channel_self_attention(const Tensor<T>& x, std::int64_t height, std::int64_t width,
                                 const AttentionConfig& cfg, const ParamStore<T>& params, const std::string& prefix,
                                 AttentionTrace<T>* trace = nullptr);

// y_e + (lambda1 * y_s + lambda2 * y_c). The weighted pair is summed first so
// that equal branches reproduce (1 + lambda1 + lambda2) * y exactly for dyadic y.
template <typename T>
Tensor<T> fuse_branches(const Tensor<T>& y_e, const Tensor<T>& y_s, const Tensor<T>& y_c, double lambda1,
                        double lambda2);

template <typename T>
Tensor<T> mdt_block(const Tensor<T>& x, std::int64_t height, std::int64_t width, const BlockConfig& cfg,
                    const ParamStore<T>& params, const std::string& prefix, AttentionTrace<T>* trace = nullptr);

// Clamps every `*.alpha` tensor in the store to at least kAlphaFloor.
template <typename T>
void clamp_temperatures(ParamStore<T>& params);

}  // namespace mdtaf
