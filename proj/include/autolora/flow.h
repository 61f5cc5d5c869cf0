#pragma once

#include <vector>

#include "autolora/fused_model.h"
#include "autolora/rng.h"

namespace autolora {

// One flow-matching minibatch. c holds one condition row per sample.
struct FlowBatch {
  Tensor x0;
  Tensor x1;
  std::vector<double> t;
  Tensor c;
};

// (1 - t) x0 + t x1, row-wise t. Throws ArgumentError for t outside [0, 1].
Tensor interpolate(const Tensor& x0, const Tensor& x1, const std::vector<double>& t);
Tensor interpolate(const Tensor& x0, const Tensor& x1, double t);

struct FlowLoss {
  double loss = 0.0;
  HandleGrads grads;  // populated only for the requested groups
};

// Mean over the batch of ||V(x_t, c, t) - (x1 - x0)||^2.
FlowLoss flow_matching_loss(const ModelHandle& h, const FlowBatch& batch, GradRequest request = {});

// Points plus per-sample conditions.
struct FlowDataset {
  Tensor points;  // n x 2
  Tensor conditions;  // n x c_dim
  std::vector<std::string> captions;

  std::size_t size() const { return points.rows(); }
};

// Rows `indices` of the dataset, fresh Gaussian x0 and t ~ Uniform(0, 1).
FlowBatch draw_batch(const FlowDataset& data, const std::vector<std::size_t>& indices, Rng& rng);

}  // namespace autolora
