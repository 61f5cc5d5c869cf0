#include "autolora/grad_check.h"

#include <algorithm>
#include <cmath>

namespace autolora {

GradReport grad_check(const std::string& op_name, const ScalarFunction& op, std::vector<Tensor> inputs,
                      double fd_step, double tol) {
  for (const Tensor& t : inputs) require_finite(t, "grad_check(" + op_name + ") input");

  std::vector<Tensor> analytic;
  for (const Tensor& t : inputs) analytic.emplace_back(t.shape());
  const double base = op(inputs, &analytic);
  if (!std::isfinite(base)) throw NumericError("grad_check(" + op_name + "): non-finite output");
  if (analytic.size() != inputs.size()) throw ArgumentError("grad_check: gradient count mismatch");
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    require_same_shape(analytic[i], inputs[i], "grad_check(" + op_name + ") gradient");
    require_finite(analytic[i], "grad_check(" + op_name + ") gradient");
  }

  GradReport report{op_name, 0.0, -1, true};
  long flat = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j, ++flat) {
      const double saved = inputs[i][j];
      inputs[i][j] = saved + fd_step;
      const double plus = op(inputs, nullptr);
      inputs[i][j] = saved - fd_step;
      const double minus = op(inputs, nullptr);
      inputs[i][j] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericError("grad_check(" + op_name + "): non-finite output under perturbation");
      }
      const double fd = (plus - minus) / (2.0 * fd_step);
      const double ga = analytic[i][j];
      const double err = std::abs(ga - fd) / std::max(1e-12, std::abs(ga) + std::abs(fd));
      if (report.worst_index < 0 || err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst_index = flat;
      }
    }
  }
  report.passed = report.max_rel_err < tol;
  return report;
}

}  // namespace autolora
