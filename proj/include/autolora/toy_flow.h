#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "autolora/flow.h"

namespace autolora {

// One (theme, variation) distribution over the plane.
struct ThemeSpec {
  std::string theme_id;   // unique, e.g. "spiral-tight"; also the adapter id
  std::string theme;      // group name, e.g. "spiral"
  std::string generator;  // two-moons | concentric-rings | grid | spiral | gaussian-mixture | checkerboard
  double param = 0.0;     // generator-specific variation parameter
  std::string variation;  // word used in captions
  std::vector<std::string> caption_templates;  // "{theme}" and "{variation}" placeholders
  std::vector<std::string> heldout_templates;  // never used for training
};

// 6 generators x 3 variations.
std::vector<ThemeSpec> standard_themes();
std::vector<std::string> generator_names();

std::string fill_template(const std::string& tmpl, const ThemeSpec& theme);

struct ThemeSamples {
  Tensor points;  // n x 2
  std::vector<std::string> captions;
};

// Throws ArgumentError for n = 0 or an unknown generator.
ThemeSamples make_dataset(const ThemeSpec& theme, std::size_t n, std::uint64_t seed);
FlowDataset to_flow_dataset(const ThemeSamples& samples, const ToyModelConfig& config);
FlowDataset concat(const std::vector<FlowDataset>& parts);

struct FlowTrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 256;
  double lr = 2e-3;
};

struct TrainCurve {
  // Full-dataset loss with fixed noise: entry 0 before training, entry e
  // after epoch e.
  std::vector<double> epoch_loss;
};

// Flow-matching training of every base weight. The result is rounded to
// f32 so that it round-trips through LTOY exactly.
ToyModel train_base(ToyModel model, const FlowDataset& data, const FlowTrainConfig& config, std::uint64_t seed,
                    TrainCurve* curve = nullptr);

struct LoraTrainConfig {
  std::size_t rank = 4;
  std::size_t epochs = 40;
  std::size_t batch_size = 128;
  double lr = 5e-3;
};

// Fresh adapter on every hosted layer: B = 0, A ~ N(0, 1/k), alpha = rank.
LoRAAdapter init_lora(const ToyModel& base, const std::string& adapter_id, std::size_t rank, std::uint64_t seed);

// Trains only B and A of a fresh adapter on one theme's data.
LoRAAdapter train_lora(const ToyModel& base, const FlowDataset& data, const std::string& adapter_id,
                       const LoraTrainConfig& config, std::uint64_t seed, TrainCurve* curve = nullptr);

// Mean flow-matching loss over the whole dataset with a fixed noise seed.
double evaluate_flow_loss(const ModelHandle& h, const FlowDataset& data, std::uint64_t seed,
                          std::size_t batch_size = 512);

// Euler integration from x0 ~ N(0, I) over t in [0, 1]; c is 1 x c_dim
// (shared) or n x c_dim.
Tensor generate(const ModelHandle& h, const Tensor& c, std::size_t n, std::size_t steps, std::uint64_t seed);
// Same, from given starting points.
Tensor integrate(const ModelHandle& h, const Tensor& c, Tensor x, std::size_t steps);

// 2 E||X - Y|| - E||X - X'|| - E||Y - Y'|| over all pairs (V-statistic, so
// always >= 0).
double energy_distance(const Tensor& x, const Tensor& y);
// Against a fresh draw of n_ref theme samples.
double eval_sample_quality(const Tensor& samples, const ThemeSpec& theme, std::uint64_t seed,
                           std::size_t n_ref = 500);

// JSON lines {"x": [f, f], "caption": str}.
void write_dataset_jsonl(const std::filesystem::path& path, const ThemeSamples& samples);
ThemeSamples read_dataset_jsonl(const std::filesystem::path& path);
// "x,y" header, one row per sample.
void write_samples_csv(const std::filesystem::path& path, const Tensor& samples);

}  // namespace autolora
