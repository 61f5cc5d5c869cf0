#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "autolora/ops.h"

namespace autolora {

// Learnable vectors of one fusion gate, all of the host layer's output
// width d.
//   w_x  base feature gate
//   w_l  adapter-specific gate
//   w_c  cross-interaction gate
//   b    bias
//   w_o  fusion scaling applied to the gated sum
struct GateParams {
  Tensor w_x, w_l, w_c, b, w_o;

  std::size_t dim() const { return w_o.size(); }
  std::vector<Tensor*> parameter_list() { return {&w_x, &w_l, &w_c, &b, &w_o}; }
  bool operator==(const GateParams&) const = default;
};

// All zeros: every gate starts at sigmoid(0) = 0.5 and, with w_o = 0, the
// fused output equals the base output exactly. The seed is accepted for
// interface symmetry with the other initializers.
GateParams init_gate(std::size_t d, std::uint64_t seed = 0);

enum class GateMode {
  PerToken,  // one gate row per (adapter, token)
  Pooled,    // pre-activation averaged over tokens, one row per adapter
};

// Base output x (l x d) and the k adapter branch outputs, each l x d.
struct FusionActivation {
  Tensor x;
  std::vector<Tensor> branches;
};

// One entry per adapter: l x d in per-token mode, 1 x d in pooled mode.
using GateMatrix = std::vector<Tensor>;

struct FusionCache {
  LayerNormCache x_norm;
  std::vector<LayerNormCache> branch_norms;
  GateMatrix gates;
};

// Pre-activation of one gate entry from normalized features.
inline double gate_preactivation(double x_hat, double l_hat, double w_x, double w_l, double w_c, double b) {
  return x_hat * w_x + l_hat * w_l + x_hat * l_hat * w_c + b;
}

GateMatrix compute_gates(const FusionActivation& act, const GateParams& p, GateMode mode = GateMode::PerToken,
                         FusionCache* cache = nullptr);

// x' = x + sum_i w_o * g_i * l_i
Tensor fuse_forward(const FusionActivation& act, const GateParams& p, GateMode mode = GateMode::PerToken,
                    FusionCache* cache = nullptr);

struct FusionGrads {
  Tensor dx;
  std::vector<Tensor> dbranches;
  GateParams dp;
};

FusionGrads fuse_backward(const FusionActivation& act, const GateParams& p, GateMode mode, const Tensor& upstream,
                          const FusionCache& cache);

// Per-layer gates for a whole host model.
using GateBundle = std::map<std::string, GateParams>;

// LGAT container: manifest {"layers": {layer_id: d}}, payload per layer in
// manifest (sorted id) order: w_x, w_l, w_c, b, w_o.
void save_gates(const GateBundle& gates, const std::filesystem::path& path);
GateBundle load_gates(const std::filesystem::path& path);
std::string encode_gates(const GateBundle& gates);
GateBundle decode_gates(std::string_view bytes);

}  // namespace autolora
