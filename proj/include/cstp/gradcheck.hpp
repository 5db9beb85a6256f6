#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "cstp/autodiff.hpp"

namespace cstp::ad {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

using ScalarFn = std::function<Var(const ParamStore&)>;

/// Compares reverse-mode gradients against central differences
/// (f(p+h) - f(p-h)) / 2h for every scalar of every parameter. The relative
/// error denominator is max(|analytic|, |numeric|, floor).
inline GradCheckReport finite_diff_check(const ScalarFn& f, const ParamStore& params,
                                         double h = 1e-5, double floor = 1e-8) {
  if (!(h > 0.0)) throw ValueError("finite_diff_check: step must be positive");
  const GradResult analytic = grad(f(params), params);
  GradCheckReport report;
  NoGradGuard no_grad;
  for (const auto& [name, var] : params) {
    Tensor& value = var.node().value;
    auto found = analytic.find(name);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + h;
      const double fp = f(params).value()[0];
      value[i] = saved - h;
      const double fm = f(params).value()[0];
      value[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = found == analytic.end() ? 0.0 : found->second[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        if (rel >= report.max_rel_error) {
          report.worst_param = name;
          report.worst_index = i;
          report.analytic = a;
          report.numeric = numeric;
        }
      }
    }
  }
  return report;
}

}  // namespace cstp::ad
