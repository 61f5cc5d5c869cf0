#pragma once

#include <optional>
#include <vector>

#include "autolora/gate.h"
#include "autolora/lora.h"
#include "autolora/toy_model.h"

namespace autolora {

enum class FusionKind {
  Base,    // adapters ignored
  Direct,  // x + scale * sum_i l_i
  Gated,   // fuse_forward per hosted layer
};

// A host model with adapters attached. Each hosted layer's branches are the
// adapters carrying that layer in list order, then the global LoRA when
// present. The handle refers to the base model, which must outlive it.
struct ModelHandle {
  const ToyModel* base = nullptr;
  std::vector<LoRAAdapter> adapters;
  std::optional<LoRAAdapter> global;
  FusionKind kind = FusionKind::Base;
  double direct_scale = 1.0;
  GateBundle gates;
  GateMode gate_mode = GateMode::PerToken;

  // Deltas feeding layer `name`, in branch order.
  std::vector<const LayerDelta*> branches(const std::string& name) const;
};

ModelHandle base_handle(const ToyModel& base);
ModelHandle attach_direct(const ToyModel& base, std::vector<LoRAAdapter> adapters, double scale = 1.0,
                          std::optional<LoRAAdapter> global = std::nullopt);
// Throws ArgumentError when an adapter layer is unknown or its dims differ
// from the host, or when a layer with branches lacks a gate of width d.
ModelHandle attach_fusion(const ToyModel& base, std::vector<LoRAAdapter> adapters, GateBundle gates,
                          std::optional<LoRAAdapter> global = std::nullopt,
                          GateMode mode = GateMode::PerToken);

struct LayerTrace {
  Tensor input;                     // n x in
  Tensor base_out;                  // x W^T + b
  std::vector<Tensor> projections;  // per branch, input A^T (n x r)
  std::vector<Tensor> branch_out;   // per branch, scale * proj B^T (n x d)
  FusionCache fusion;
  Tensor fused;                     // pre-activation output
};

struct ForwardCache {
  std::vector<LayerTrace> layers;
};

// Velocity for a batch of feature rows (see featurize), n x 2.
Tensor velocity(const ModelHandle& h, const Tensor& features, ForwardCache* cache = nullptr);

struct GradRequest {
  bool base = false;
  bool adapters = false;
  bool gates = false;
};

struct AdapterGrads {
  std::vector<Tensor> dB;  // per layer, adapter layer order
  std::vector<Tensor> dA;
};

struct HandleGrads {
  std::vector<DenseLayer> base;         // weight/bias grads, base layer order
  std::vector<AdapterGrads> adapters;   // handle adapter order
  GateBundle gates;
  Tensor dfeatures;
};

HandleGrads velocity_backward(const ModelHandle& h, const Tensor& dv, const ForwardCache& cache,
                              GradRequest request);

}  // namespace autolora
