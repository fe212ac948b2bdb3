#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

namespace mdtaf {

enum class AttentionKind { kDense, kEsa, kSsa, kCsa };

std::string to_string(AttentionKind kind);
AttentionKind attention_kind_from_string(const std::string& name);

// Closed-form FLOP count of one forward pass over N tokens of width C, with a
// multiply-add counted as 2. Softmax and elementwise work below O(N C) are
// ignored. `r_or_w` is R for ESA, the window for SSA, and unused otherwise.
//   dense: 8NC^2 + 4N^2C
//   esa:   12NC^2 + 4N^2C/R
//   ssa:   8NC^2 + 4Nw^2C + tail
//   csa:   8NC^2 + 4NC^2/h + tail
// where tail = 2NC^2 + 2NC^2/r1 + 2NC/r1 + 18NC covers the final merge, the
// spatial gate and the 3x3 depthwise conv. The channel gate acts on pooled
// features and is dropped.
double attention_flops(AttentionKind kind, std::int64_t n, std::int64_t c, std::int64_t r_or_w, int heads = 1,
                       int r1 = 8);

struct BenchOptions {
  std::vector<AttentionKind> kinds{AttentionKind::kDense, AttentionKind::kEsa, AttentionKind::kSsa,
                                   AttentionKind::kCsa};
  // Token counts; each must be a perfect square (the token grid is sqrt(N) x sqrt(N)).
  std::vector<std::int64_t> sizes{1024, 4096};
  std::int64_t channels = 64;
  std::vector<std::int64_t> reductions{1, 2, 4, 8};
  std::int64_t window = 8;
  int heads = 1;
  int repeats = 3;
  std::uint64_t seed = 0;

  // Throws ConfigError for a bad size, reduction or repeat count.
  void validate() const;
};

struct BenchRow {
  std::string kind;
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t r_or_w = 0;
  double flops_estimate = 0.0;
  double wall_ms = 0.0;  // median over repeats, after one warm-up pass
};

using BenchRowFn = std::function<void(const BenchRow&)>;

// ESA runs once per reduction; dense reports R=1, SSA the window and CSA 0.
std::vector<BenchRow> run_bench(const BenchOptions& options, const BenchRowFn& on_row = {});

inline constexpr char kBenchCsvHeader[] = "kind,N,C,R_or_w,flops_estimate,wall_ms";
void write_bench_row(std::ostream& os, const BenchRow& row);

}  // namespace mdtaf
