#pragma once

#include "csrr/tape.hpp"

#include <functional>
#include <string>
#include <vector>

namespace csrr::nn {

// Evaluates the scalar loss at the current parameter values. When
// accumulate_grads is true it must also add d(loss)/d(param) into every
// Param::grad (grad_check zeroes them first).
using LossFn = std::function<double(bool accumulate_grads)>;

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, denom_floor).
  double denom_floor = 1e-6;
  // 0 checks every coordinate; otherwise a deterministic stride covers at
  // most this many coordinates per parameter.
  std::size_t max_coords_per_param = 0;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Eigen::Index worst_index = -1;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  std::string worst_param;
  bool passed = false;
};

// Central differences (f(x+eps) - f(x-eps)) / 2eps against the analytic
// gradient, coordinate by coordinate. Parameter values are restored.
GradCheckReport grad_check(ParamStore& params, const LossFn& loss, const GradCheckOptions& options);

}  // namespace csrr::nn
