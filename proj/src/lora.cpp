#include "autolora/lora.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "autolora/ops.h"

namespace autolora {

void LayerDelta::validate() const {
  const auto fail = [&](const std::string& why) {
    throw FormatError(FormatError::Kind::Shape, "layer '" + layer_id + "': " + why);
  };
  if (layer_id.empty()) fail("empty layer id");
  if (d == 0 || k == 0 || r == 0) fail("dimensions must be positive");
  if (r > std::min(d, k)) fail("rank exceeds min(d, k)");
  if (B.shape() != std::vector<std::size_t>{d, r}) fail("B has shape " + B.shape_string());
  if (A.shape() != std::vector<std::size_t>{r, k}) fail("A has shape " + A.shape_string());
  if (!(alpha > 0.0) || !std::isfinite(alpha)) fail("alpha must be positive");
}

const LayerDelta* LoRAAdapter::find(const std::string& layer_id) const {
  for (const LayerDelta& ld : layers) {
    if (ld.layer_id == layer_id) return &ld;
  }
  return nullptr;
}

void LoRAAdapter::validate() const {
  if (layers.empty()) throw FormatError(FormatError::Kind::Shape, "adapter '" + adapter_id + "' has no layers");
  std::set<std::string> seen;
  for (const LayerDelta& ld : layers) {
    ld.validate();
    if (!seen.insert(ld.layer_id).second) {
      throw FormatError(FormatError::Kind::Shape, "adapter '" + adapter_id + "' repeats layer " + ld.layer_id);
    }
  }
}

Tensor materialize_delta(const LayerDelta& ld) {
  ld.validate();
  return matmul(ld.B, ld.A) * ld.scale();
}

Tensor sum_deltas(const std::vector<LoRAAdapter>& adapters, const std::string& layer_id) {
  Tensor total;
  bool found = false;
  for (const LoRAAdapter& a : adapters) {
    const LayerDelta* ld = a.find(layer_id);
    if (!ld) continue;
    Tensor delta = materialize_delta(*ld);
    if (!found) {
      total = std::move(delta);
      found = true;
    } else if (!total.same_shape(delta)) {
      throw FormatError(FormatError::Kind::Shape, "layer '" + layer_id + "': adapters disagree on (d, k)");
    } else {
      total += delta;
    }
  }
  if (!found) throw MissingLayer("no adapter carries layer '" + layer_id + "'");
  return total;
}

WeightMap apply_direct(const WeightMap& base_weights, const std::vector<LoRAAdapter>& adapters, double scale) {
  WeightMap merged = base_weights;
  for (const LoRAAdapter& a : adapters) {
    for (const LayerDelta& ld : a.layers) {
      auto it = merged.find(ld.layer_id);
      if (it == merged.end()) {
        throw FormatError(FormatError::Kind::Shape, "base model has no layer '" + ld.layer_id + "'");
      }
      Tensor delta = materialize_delta(ld);
      if (!delta.same_shape(it->second)) {
        throw FormatError(FormatError::Kind::Shape, "layer '" + ld.layer_id + "': delta " + delta.shape_string() +
                                                        " vs base " + it->second.shape_string());
      }
      it->second += delta * scale;
    }
  }
  return merged;
}

void round_to_f32(LoRAAdapter& adapter) {
  for (LayerDelta& ld : adapter.layers) {
    for (double& v : ld.B.values()) v = static_cast<float>(v);
    for (double& v : ld.A.values()) v = static_cast<float>(v);
  }
}

}  // namespace autolora
