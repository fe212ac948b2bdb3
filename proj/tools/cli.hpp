#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>

#include "json.hpp"

namespace mdtaf::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailed = 1;
inline constexpr int kExitUsage = 2;

// Flat dotted keys ("model.stage_channels", "train.lr_max", ...). A null value
// means "not set": model fields fall back to the preset, seeds to "seed".
using FlatConfig = std::map<std::string, nlohmann::json>;

// Every recognised key with its default. `seed` is the global default seed.
FlatConfig default_config(std::uint64_t seed);

// Accepts flat dotted keys or nested objects (flattened on read). Unknown keys
// and malformed JSON raise ConfigError.
void merge_config(FlatConfig& config, const nlohmann::json& overrides, const std::string& origin);

// MDTAF_SEED if set (ConfigError when not an unsigned integer), else 0.
std::uint64_t env_seed();

// Parses argv, prints the resolved config, runs the subcommand. Progress goes
// to `out` as JSON lines (CSV for bench), errors to `err`.
// Returns 0 on success, 1 when a check fails or the work itself fails, 2 on a
// usage or configuration error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mdtaf::cli
