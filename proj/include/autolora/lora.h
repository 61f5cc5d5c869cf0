#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "autolora/tensor.h"

namespace autolora {

// Malformed adapter data or container bytes. Container readers report the
// specific failure through kind().
class FormatError : public std::runtime_error {
 public:
  enum class Kind { Shape, BadMagic, VersionMismatch, Truncated, LengthMismatch, Manifest };

  FormatError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// No adapter in a list carries the requested layer.
class MissingLayer : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Low-rank update of one host linear layer. The effective weight delta is
// (alpha / r) * B * A with B (d x r) and A (r x k).
struct LayerDelta {
  std::string layer_id;
  std::size_t d = 0;
  std::size_t k = 0;
  std::size_t r = 0;
  Tensor B;
  Tensor A;
  double alpha = 1.0;

  double scale() const { return alpha / static_cast<double>(r); }
  // Throws FormatError(Shape) when shapes or scalars are inconsistent.
  void validate() const;
  bool operator==(const LayerDelta&) const = default;
};

struct LoRAAdapter {
  std::string adapter_id;
  std::vector<LayerDelta> layers;  // canonical host-layer order
  std::map<std::string, std::string> metadata;

  const LayerDelta* find(const std::string& layer_id) const;
  void validate() const;
  bool operator==(const LoRAAdapter&) const = default;
};

// Host weights keyed by layer id, each (d x k).
using WeightMap = std::map<std::string, Tensor>;

Tensor materialize_delta(const LayerDelta& ld);

// Sum of the materialized deltas of every adapter that carries layer_id.
// Adapters lacking the layer contribute zero.
Tensor sum_deltas(const std::vector<LoRAAdapter>& adapters, const std::string& layer_id);

// W0 + scale * sum_i delta_i for every layer; layers without adapters are
// copied unchanged.
WeightMap apply_direct(const WeightMap& base_weights, const std::vector<LoRAAdapter>& adapters, double scale);

// Rounds every tensor value to the nearest float, matching what a pack
// round-trip stores.
void round_to_f32(LoRAAdapter& adapter);

}  // namespace autolora
