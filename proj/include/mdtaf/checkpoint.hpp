#pragma once

#include <string>

#include "mdtaf/model.hpp"
#include "mdtaf/param_store.hpp"

namespace mdtaf {

// Binary layout, all integers unsigned 64-bit little-endian:
//   "MDTAF001"
//   u64 length, UTF-8 JSON model config
//   u64 tensor count
//   per tensor: u64 length + name, u64 rank, rank x u64 extents, raw f32 LE data
inline constexpr char kCheckpointMagic[] = "MDTAF001";

struct Checkpoint {
  ModelConfig config;
  ParamStore<float> params;
};

// Writes to `path` through a temporary file and a rename.
void save_checkpoint(const ParamStore<float>& params, const ModelConfig& cfg, const std::string& path);

// Errors: IoError (missing/unreadable), MagicError, VersionError,
// FormatError (truncated or malformed), TensorCountError and
// ShapeMismatchError (stored tensors disagree with the stored config).
Checkpoint load_checkpoint(const std::string& path);

// As above, but the tensors must match the layout of `expected` instead.
ParamStore<float> load_checkpoint_params(const std::string& path, const ModelConfig& expected);

// Checks a store against a layout: count, then names and shapes in order.
void check_against_layout(const ParamStore<float>& params, const ParamLayout& layout);

}  // namespace mdtaf
