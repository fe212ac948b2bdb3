#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mdtaf/tensor.hpp"

namespace mdtaf {

struct GradCheckOptions {
  double eps = 1e-5;
  // Coordinates checked per input tensor; 0 checks every coordinate.
  std::int64_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::int64_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::int64_t coords_checked = 0;
};

using ScalarFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// |a - n| / max(1e-8, |a|, |n|)
double relative_error(double analytic, double numeric);

// Compares reverse-mode gradients of a scalar-valued fn against central
// differences (f(x + eps) - f(x - eps)) / (2 eps), one coordinate at a time.
// Inputs are perturbed in place and restored.
GradCheckResult grad_check(const ScalarFn& fn, std::vector<Tensor<double>> inputs,
                           const GradCheckOptions& options = {});

}  // namespace mdtaf
