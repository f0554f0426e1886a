#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "upt/tensor.hpp"

namespace upt {

struct NamedParam {
  std::string name;
  ParamTensor* param;
};

struct GradCheckOptions {
  double step = 1e-4;
  std::size_t samples_per_tensor = 32;
  std::uint64_t seed = 0;
};

struct TensorCheck {
  std::string name;
  bool frozen = false;
  std::size_t coords_checked = 0;
  double max_rel_error = 0.0;
  // Largest analytic |grad| seen; for frozen tensors this must stay 0.
  double max_abs_grad = 0.0;

  bool passed(double tolerance) const {
    return frozen ? max_abs_grad == 0.0 : max_rel_error < tolerance;
  }
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;

  double worst_rel_error() const {
    double w = 0.0;
    for (const auto& t : tensors)
      if (!t.frozen) w = std::max(w, t.max_rel_error);
    return w;
  }
  bool passed(double tolerance) const {
    return std::all_of(tensors.begin(), tensors.end(),
                       [&](const TensorCheck& t) { return t.passed(tolerance); });
  }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

// Scalar objective probed by the checker. With accumulate=true it must also
// add dLoss/dparam into every ParamTensor::grad it touches.
using Objective = std::function<double(bool accumulate)>;

// Compares the analytic gradient accumulated by `objective` against central
// differences on a random subsample of coordinates of every trainable tensor.
inline GradCheckReport check_gradient(const Objective& objective, std::span<const NamedParam> params,
                                      const GradCheckOptions& options = {}) {
  for (const auto& p : params) p.param->zero_grad();
  const double base = objective(true);
  if (objective(false) != base) {
    throw OracleError("objective is not deterministic at the probe point");
  }

  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.param->grad);

  Rng rng(options.seed);
  GradCheckReport report;
  for (std::size_t t = 0; t < params.size(); ++t) {
    ParamTensor& param = *params[t].param;
    TensorCheck check{params[t].name, !param.trainable};
    for (double g : analytic[t].data()) check.max_abs_grad = std::max(check.max_abs_grad, std::abs(g));
    if (check.frozen) {
      report.tensors.push_back(check);
      continue;
    }

    std::vector<std::size_t> coords(param.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > options.samples_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.samples_per_tensor);
    }
    for (std::size_t c : coords) {
      double& slot = param.value[c];
      const double saved = slot;
      slot = saved + options.step;
      const double plus = objective(false);
      slot = saved - options.step;
      const double minus = objective(false);
      slot = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      check.max_rel_error = std::max(check.max_rel_error, relative_error(analytic[t][c], numeric));
      ++check.coords_checked;
    }
    report.tensors.push_back(check);
  }
  for (const auto& p : params) p.param->zero_grad();
  return report;
}

}  // namespace upt
