#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "autolora/encoder.h"
#include "autolora/lora.h"
#include "autolora/text_embed.h"

namespace autolora {

struct ToyModelConfig {
  std::size_t hidden_layers = 4;
  std::size_t width = 64;
  std::size_t c_dim = 16;
  std::size_t time_freqs = 3;  // sin/cos pairs of t at frequencies 1..time_freqs
  TextConfig text;

  std::size_t input_dim() const { return 2 + 1 + 2 * time_freqs + c_dim; }
  bool operator==(const ToyModelConfig&) const = default;
};

// y = x W^T + b with W (out x in).
struct DenseLayer {
  std::string name;
  Tensor weight;
  Tensor bias;

  bool operator==(const DenseLayer&) const = default;
};

// Velocity MLP: features -> fc0 -> silu -> ... -> fc{H-1} -> silu -> head.
// The hidden layers fc* host LoRA adapters; the 2-wide head does not.
struct ToyModel {
  ToyModelConfig config;
  std::vector<DenseLayer> layers;  // hidden layers then "head"

  std::size_t hidden_count() const { return layers.size() - 1; }
  LayerCatalog lora_catalog() const;
  // Hidden-layer weights keyed by name, the form apply_direct expects.
  WeightMap hosted_weights() const;
  const DenseLayer& layer(const std::string& name) const;
  std::vector<Tensor*> parameter_list();
  bool operator==(const ToyModel&) const = default;
};

ToyModel init_toy_model(const ToyModelConfig& config, std::uint64_t seed);

// Fixed seeded projection of the caption's text embedding to c_dim.
Tensor condition_embedding(const std::string& caption, const ToyModelConfig& config);

// Network input rows [x, t, sin(2 pi f t), cos(2 pi f t) ..., c]. c is
// either one row (broadcast) or one row per sample.
Tensor featurize(const Tensor& x, const std::vector<double>& t, const Tensor& c, const ToyModelConfig& config);

// "LTOY" container.
std::string encode_toy_model(const ToyModel& model);
ToyModel decode_toy_model(std::string_view bytes);
void save_toy_model(const ToyModel& model, const std::filesystem::path& path);
ToyModel load_toy_model(const std::filesystem::path& path);

}  // namespace autolora
