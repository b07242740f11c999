#include "csrr/grad_check.hpp"

#include "csrr/error.hpp"

#include <algorithm>
#include <cmath>

namespace csrr::nn {

namespace {

double finite_or_throw(double v, const std::string& where) {
  if (!std::isfinite(v)) throw Error("gradcheck.nonfinite", "non-finite loss " + where);
  return v;
}

}  // namespace

GradCheckReport grad_check(ParamStore& params, const LossFn& loss, const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw Error("gradcheck.eps", "grad_check: eps must be positive");

  params.zero_grad();
  finite_or_throw(loss(true), "at the base point");

  GradCheckReport report;
  for (const auto& holder : params.all()) {
    Param& p = *holder;
    GradCheckEntry entry;
    entry.name = p.name;
    const Eigen::Index n = p.size();
    Eigen::Index stride = 1;
    if (options.max_coords_per_param > 0 && static_cast<std::size_t>(n) > options.max_coords_per_param)
      stride = (n + static_cast<Eigen::Index>(options.max_coords_per_param) - 1) /
               static_cast<Eigen::Index>(options.max_coords_per_param);

    for (Eigen::Index i = 0; i < n; i += stride) {
      double& x = p.value.data()[i];
      const double saved = x;
      x = saved + options.eps;
      const double up = finite_or_throw(loss(false), "at +eps for " + p.name);
      x = saved - options.eps;
      const double down = finite_or_throw(loss(false), "at -eps for " + p.name);
      x = saved;

      const double numeric = (up - down) / (2.0 * options.eps);
      const double analytic = p.grad.data()[i];
      const double abs_err = std::abs(analytic - numeric);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), options.denom_floor});
      const double rel = abs_err / denom;
      if (rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
      }
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      ++entry.checked;
    }
    if (entry.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = entry.max_rel_error;
      report.worst_param = entry.name;
    }
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

}  // namespace csrr::nn
