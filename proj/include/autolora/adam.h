#pragma once

#include <cstdint>
#include <vector>

#include "autolora/tensor.h"

namespace autolora {

struct AdamState {
  std::int64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(double learning_rate = 1e-3) : lr(learning_rate) {}
};

// One bias-corrected Adam update. Moment buffers are created on the first
// call and must keep matching the parameter shapes afterwards.
void adam_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, AdamState& state);

}  // namespace autolora
