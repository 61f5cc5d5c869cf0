#pragma once

#include <functional>
#include <string>
#include <vector>

#include "autolora/tensor.h"

namespace autolora {

struct GradReport {
  std::string op_name;
  double max_rel_err = 0.0;
  long worst_index = -1;  // flat index across all inputs, -1 if no elements
  bool passed = false;
};

// Scalar-valued function of several tensors. When grads is non-null the
// function writes the analytic gradient for every input (same shapes).
using ScalarFunction = std::function<double(const std::vector<Tensor>& inputs, std::vector<Tensor>* grads)>;

// Central finite differences against the analytic gradient. The error per
// element is |g_a - g_fd| / max(1e-12, |g_a| + |g_fd|).
GradReport grad_check(const std::string& op_name, const ScalarFunction& op, std::vector<Tensor> inputs,
                      double fd_step = 1e-5, double tol = 1e-4);

}  // namespace autolora
