#include "mdtaf/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace mdtaf {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({1e-8, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check(const ScalarFn& fn, std::vector<Tensor<double>> inputs,
                           const GradCheckOptions& options) {
  std::vector<bool> previous;
  for (auto& t : inputs) {
    previous.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const Tensor<double> out = fn(inputs);
    if (out.numel() != 1) {
      throw ContractError("grad_check needs a scalar-valued function, got shape " + shape_str(out.shape()));
    }
    tape.backward(out);
  }
  for (auto& t : inputs) {
    analytic.emplace_back(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.back().begin());
    t.zero_grad();
  }

  auto evaluate = [&]() { return fn(inputs).item(); };

  GradCheckResult result;
  std::mt19937_64 rng(options.seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    std::vector<std::int64_t> coords(data.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords_per_input > 0 &&
        static_cast<std::int64_t>(coords.size()) > options.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(options.max_coords_per_input));
      std::sort(coords.begin(), coords.end());
    }
    for (auto idx : coords) {
      const auto i = static_cast<std::size_t>(idx);
      const double saved = data[i];
      data[i] = saved + options.eps;
      const double plus = evaluate();
      data[i] = saved - options.eps;
      const double minus = evaluate();
      data[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double err = relative_error(analytic[k][i], numeric);
      ++result.coords_checked;
      if (err > result.max_rel_error || !std::isfinite(err)) {
        result.max_rel_error = std::isfinite(err) ? err : INFINITY;
        result.worst_input = k;
        result.worst_index = idx;
        result.worst_analytic = analytic[k][i];
        result.worst_numeric = numeric;
      }
    }
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) inputs[k].set_requires_grad(previous[k]);
  return result;
}

}  // namespace mdtaf
