#include "autolora/flow.h"

#include <cmath>

namespace autolora {

Tensor interpolate(const Tensor& x0, const Tensor& x1, const std::vector<double>& t) {
  require_same_shape(x0, x1, "interpolate");
  if (t.size() != x0.rows()) throw ArgumentError("interpolate: need one t per row");
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < x0.rows(); ++i) {
    if (!(t[i] >= 0.0 && t[i] <= 1.0)) throw ArgumentError("interpolate: t must lie in [0, 1]");
    for (std::size_t j = 0; j < x0.cols(); ++j) out(i, j) = (1.0 - t[i]) * x0(i, j) + t[i] * x1(i, j);
  }
  return out;
}

Tensor interpolate(const Tensor& x0, const Tensor& x1, double t) {
  return interpolate(x0, x1, std::vector<double>(x0.rows(), t));
}

FlowLoss flow_matching_loss(const ModelHandle& h, const FlowBatch& batch, GradRequest request) {
  const std::size_t n = batch.x0.rows();
  if (n == 0) throw ArgumentError("flow_matching_loss: empty batch");
  const Tensor xt = interpolate(batch.x0, batch.x1, batch.t);
  const Tensor target = batch.x1 - batch.x0;
  ForwardCache cache;
  const bool want_grads = request.base || request.adapters || request.gates;
  const Tensor v = velocity(h, featurize(xt, batch.t, batch.c, h.base->config), want_grads ? &cache : nullptr);
  Tensor diff = v - target;
  FlowLoss out;
  for (double d : diff.values()) out.loss += d * d;
  out.loss /= static_cast<double>(n);
  if (!std::isfinite(out.loss)) throw NumericError("flow_matching_loss: non-finite loss");
  if (want_grads) out.grads = velocity_backward(h, diff * (2.0 / static_cast<double>(n)), cache, request);
  return out;
}

FlowBatch draw_batch(const FlowDataset& data, const std::vector<std::size_t>& indices, Rng& rng) {
  const std::size_t n = indices.size();
  FlowBatch b{rng.gaussian_tensor({n, 2}, 1.0), Tensor::matrix(n, 2), std::vector<double>(n),
              Tensor::matrix(n, data.conditions.cols())};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = indices.at(i);
    if (r >= data.size()) throw ArgumentError("draw_batch: index out of range");
    b.t[i] = rng.uniform();
    for (std::size_t j = 0; j < 2; ++j) b.x1(i, j) = data.points(r, j);
    for (std::size_t j = 0; j < data.conditions.cols(); ++j) b.c(i, j) = data.conditions(r, j);
  }
  return b;
}

}  // namespace autolora
