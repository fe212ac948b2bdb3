#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

namespace mdtaf {

// Outcome of one self-check. `value` is the measured quantity (an error, a
// count of mismatches...) and passes when it is below `tolerance`, unless the
// check is boolean, in which case value is 0 or 1 and tolerance 0.5.
struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

nlohmann::json to_json(const CheckResult& r);
CheckResult make_check(std::string name, double value, double tolerance, std::string detail = {});
CheckResult make_flag(std::string name, bool ok, std::string detail = {});

inline constexpr double kOpGradTolerance = 1e-4;
inline constexpr double kComposedGradTolerance = 1e-3;
inline constexpr double kOracleTolerance = 1e-6;

// Central-difference checks (f64, eps 1e-5) of every differentiable op.
std::vector<CheckResult> op_gradient_checks(std::uint64_t seed = 1);

enum class GradDims { kTiny, kDesk };
GradDims grad_dims_from_string(const std::string& name);

// Modules: embed, hourglass, esa, ssa, csa, block, decoder, model. Component
// modules must pass 1e-4; block and model 1e-3.
std::vector<std::string> gradcheck_modules();
CheckResult module_gradient_check(const std::string& module, GradDims dims, std::uint64_t seed = 1);

// Reference comparisons against scalar-loop attention.
CheckResult esa_dense_oracle();
CheckResult ssa_window_oracle();
CheckResult csa_loop_oracle();

// Structural identities.
CheckResult window_round_trip();
CheckResult ssa_window_locality();
CheckResult csa_permutation_equivariance();
CheckResult saturated_gate_identity();

// Default-config stage shapes and decoder resolution at size x size.
CheckResult stage_shape_contract(int size);

CheckResult uniform_bce_value();
CheckResult cosine_endpoints();
CheckResult lambda_stub_identity();
CheckResult loss_metric_cases();
CheckResult checkpoint_round_trip(const std::string& scratch_dir);

struct VerifyOptions {
  // Directory for temporary files; empty uses the system temp directory.
  std::string scratch_dir;
  // Stage-shape resolution; 512 matches the full-size contract.
  int shape_size = 512;
};

using CheckCallback = std::function<void(const CheckResult&)>;

// Gradient, shape, window, oracle, equivariance, gate, checkpoint and
// loss/metric checks. `on_result` sees each result as it completes.
std::vector<CheckResult> run_verify_suite(const VerifyOptions& options = {}, const CheckCallback& on_result = {});

}  // namespace mdtaf
