#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "autolora/container.h"
#include "autolora/toy_flow.h"

namespace autolora {
namespace {

const ThemeSpec& theme_by_id(const std::string& id) {
  static const auto themes = standard_themes();
  for (const auto& t : themes)
    if (t.theme_id == id) return t;
  throw std::runtime_error("no theme " + id);
}

ToyModelConfig small_config() {
  ToyModelConfig c;
  c.hidden_layers = 2;
  c.width = 16;
  c.c_dim = 4;
  c.time_freqs = 2;
  return c;
}

TEST(Themes, StandardPool) {
  const auto themes = standard_themes();
  ASSERT_EQ(themes.size(), 18u);
  std::set<std::string> ids, gens;
  for (const auto& t : themes) {
    ids.insert(t.theme_id);
    gens.insert(t.generator);
    EXPECT_FALSE(t.caption_templates.empty());
    EXPECT_FALSE(t.heldout_templates.empty());
    const std::string cap = fill_template(t.caption_templates[0], t);
    EXPECT_NE(cap.find(t.variation), std::string::npos);
    EXPECT_EQ(cap.find('{'), std::string::npos);
  }
  EXPECT_EQ(ids.size(), 18u);
  EXPECT_EQ(gens.size(), 6u);
}

// Re-derives two-moons points from the same random stream.
TEST(MakeDataset, TwoMoonsMatchesGenerator) {
  const ThemeSpec& t = theme_by_id("two-moons-upright");
  const ThemeSamples s = make_dataset(t, 4, 1);
  Rng rng(1);
  for (std::size_t i = 0; i < 4; ++i) {
    const double u = std::numbers::pi * rng.uniform();
    const bool upper = rng.below(2) == 0;
    const double x = upper ? std::cos(u) : 1.0 - std::cos(u);
    const double y = upper ? std::sin(u) : 0.5 - std::sin(u);
    const double ex = 1.2 * (x - 0.5) + 0.08 * rng.gaussian();
    const double ey = 1.2 * (y - 0.25) + 0.08 * rng.gaussian();
    EXPECT_NEAR(s.points(i, 0), ex, 1e-6);
    EXPECT_NEAR(s.points(i, 1), ey, 1e-6);
    // Noise-free point lies on an arc of radius 1.2.
    const double cx = upper ? -0.6 : 0.6, cy = upper ? -0.3 : 0.3;
    const double r = std::hypot(1.2 * (x - 0.5) - cx, 1.2 * (y - 0.25) - cy);
    EXPECT_NEAR(r, 1.2, 1e-12);
  }
}

TEST(MakeDataset, DeterministicAndValidated) {
  for (const auto& t : standard_themes()) {
    const ThemeSamples a = make_dataset(t, 50, 3), b = make_dataset(t, 50, 3);
    EXPECT_EQ(a.points, b.points) << t.theme_id;
    EXPECT_EQ(a.captions, b.captions);
    for (double v : a.points.values()) EXPECT_LT(std::abs(v), 3.0) << t.theme_id;
  }
  EXPECT_NE(make_dataset(theme_by_id("spiral-tight"), 10, 1).points,
            make_dataset(theme_by_id("spiral-tight"), 10, 2).points);
  EXPECT_THROW(make_dataset(theme_by_id("grid-fine"), 0, 1), ArgumentError);
  ThemeSpec bad = theme_by_id("grid-fine");
  bad.generator = "torus";
  EXPECT_THROW(make_dataset(bad, 3, 1), ArgumentError);
}

TEST(MakeDataset, CheckerboardUsesDarkCells) {
  const ThemeSamples s = make_dataset(theme_by_id("checkerboard-tiled"), 500, 4);
  for (std::size_t i = 0; i < 500; ++i) {
    const auto col = static_cast<int>(std::floor((s.points(i, 0) + 2.0) / 1.0));
    const auto row = static_cast<int>(std::floor((s.points(i, 1) + 2.0) / 1.0));
    EXPECT_EQ((row + col) % 2, 0) << i;
  }
}

TEST(DatasetIo, JsonlRoundTrip) {
  const ThemeSamples s = make_dataset(theme_by_id("spiral-loose"), 20, 5);
  const auto path = std::filesystem::temp_directory_path() / "autolora_toy_test" / "d.jsonl";
  write_dataset_jsonl(path, s);
  const ThemeSamples r = read_dataset_jsonl(path);
  EXPECT_EQ(r.points, s.points);
  EXPECT_EQ(r.captions, s.captions);
  write_samples_csv(path.parent_path() / "s.csv", s.points);
  EXPECT_EQ(read_file_bytes(path.parent_path() / "s.csv").substr(0, 4), "x,y\n");
  std::filesystem::remove_all(path.parent_path());
  EXPECT_THROW(read_dataset_jsonl(path), IoError);
}

TEST(EnergyDistance, Properties) {
  Rng rng(6);
  const Tensor x = rng.gaussian_tensor({30, 2}, 1.0), y = rng.gaussian_tensor({40, 2}, 2.0);
  EXPECT_NEAR(energy_distance(x, x), 0.0, 1e-12);
  EXPECT_NEAR(energy_distance(x, y), energy_distance(y, x), 1e-12);
  EXPECT_GE(energy_distance(x, y), 0.0);
  EXPECT_THROW(energy_distance(Tensor::matrix(0, 2), y), ArgumentError);
}

TEST(EnergyDistance, HandExample) {
  const Tensor x = Tensor::matrix(2, 2, {0, 0, 0, 1});
  const Tensor y = Tensor::matrix(2, 2, {10, 0, 10, 1});
  // 2 * (10 + 10 + 2 sqrt(101)) / 4 - 0.5 - 0.5
  EXPECT_NEAR(energy_distance(x, y), 9.0 + std::sqrt(101.0), 1e-12);
}

TEST(Featurize, Layout) {
  const ToyModelConfig cfg = small_config();
  const Tensor f = featurize(Tensor::matrix(1, 2, {0.5, -1}), {0.25}, Tensor::matrix(1, 4, {1, 2, 3, 4}), cfg);
  ASSERT_EQ(f.cols(), cfg.input_dim());
  const std::vector<double> expect{0.5, -1, 0.25, 1, 0, 0, -1, 1, 2, 3, 4};
  for (std::size_t j = 0; j < expect.size(); ++j) EXPECT_NEAR(f(0, j), expect[j], 1e-12) << j;
  EXPECT_THROW(featurize(Tensor::matrix(2, 3), {0, 0}, Tensor::matrix(1, 4), cfg), ArgumentError);
  EXPECT_THROW(featurize(Tensor::matrix(2, 2), {0}, Tensor::matrix(1, 4), cfg), ArgumentError);
}

TEST(ToyModel, CatalogStableAndPersisted) {
  const ToyModel a = init_toy_model(ToyModelConfig{}, 1), b = init_toy_model(ToyModelConfig{}, 2);
  const auto ca = a.lora_catalog();
  ASSERT_EQ(ca.size(), 4u);
  EXPECT_EQ(ca[0].layer_id, "fc0");
  EXPECT_EQ(ca[0].k, ToyModelConfig{}.input_dim());
  EXPECT_EQ(ca[3].d, 64u);
  ASSERT_EQ(b.lora_catalog().size(), ca.size());
  for (std::size_t i = 0; i < ca.size(); ++i) EXPECT_EQ(b.lora_catalog()[i].layer_id, ca[i].layer_id);

  ToyModel r = a;
  for (Tensor* t : r.parameter_list())
    for (double& v : t->values()) v = static_cast<float>(v);
  EXPECT_EQ(decode_toy_model(encode_toy_model(r)), r);
  std::string bytes = encode_toy_model(r);
  bytes[1] = '?';
  EXPECT_THROW(decode_toy_model(bytes), FormatError);
}

TEST(Generate, EulerBasics) {
  const ToyModelConfig cfg = small_config();
  ToyModel m = init_toy_model(cfg, 7);
  const Tensor c = Tensor::matrix(1, cfg.c_dim, 0.3);
  const ModelHandle h = base_handle(m);
  Rng rng(8);
  const Tensor x0 = rng.gaussian_tensor({5, 2}, 1.0);
  const Tensor one = integrate(h, c, x0, 1);
  const Tensor v0 = velocity(h, featurize(x0, std::vector<double>(5, 0.0), c, cfg));
  EXPECT_LT(max_abs_diff(one, x0 + v0), 1e-15);

  ToyModel zero = m;
  zero.layers.back().weight.fill(0.0);
  zero.layers.back().bias.fill(0.0);
  EXPECT_EQ(integrate(base_handle(zero), c, x0, 7), x0);
  EXPECT_EQ(generate(h, c, 5, 3, 9), generate(h, c, 5, 3, 9));
  Rng same(9);
  EXPECT_EQ(generate(base_handle(zero), c, 5, 3, 9), same.gaussian_tensor({5, 2}, 1.0));
  EXPECT_THROW(integrate(h, c, x0, 0), ArgumentError);
}

// Hand-built network with v(x) = a x: Euler gives x0 (1 + a/n)^n, which
// approaches the exact x0 e^a as n grows.
TEST(Generate, EulerDriftShrinksWithSteps) {
  const double a = -0.8;
  auto euler = [&](std::size_t n) { return std::pow(1.0 + a / double(n), double(n)); };
  ToyModelConfig cfg = small_config();
  cfg.hidden_layers = 1;
  cfg.width = 2;
  ToyModel m = init_toy_model(cfg, 1);
  // fc0 copies x shifted by +50, where silu is the identity in double.
  m.layers[0].weight.fill(0.0);
  m.layers[0].weight(0, 0) = 1.0;
  m.layers[0].weight(1, 1) = 1.0;
  m.layers[0].bias.fill(50.0);
  m.layers[1].weight = Tensor::matrix(2, 2, {a, 0, 0, a});
  m.layers[1].bias.fill(-50.0 * a);
  const Tensor x0 = Tensor::matrix(1, 2, {1.0, -2.0});
  const Tensor c = Tensor::matrix(1, cfg.c_dim);
  double prev = 1e9;
  for (std::size_t n : {1, 4, 16, 64}) {
    const Tensor x = integrate(base_handle(m), c, x0, n);
    EXPECT_NEAR(x(0, 0), euler(n), 1e-9);
    const double drift = std::abs(x(0, 0) - std::exp(a));
    EXPECT_LT(drift, prev);
    prev = drift;
  }
}

class TrainedToy : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = small_config();
    std::vector<FlowDataset> parts;
    for (const char* id : {"gaussian-mixture-triad", "grid-coarse", "spiral-loose"}) {
      parts.push_back(to_flow_dataset(make_dataset(theme_by_id(id), 300, 11), cfg_));
    }
    theme_ = parts[0];
    mix_ = concat(parts);
    untrained_ = init_toy_model(cfg_, 3);
    base_ = train_base(untrained_, mix_, {8, 64, 3e-3}, 4, &curve_);
  }
  static inline ToyModelConfig cfg_;
  static inline FlowDataset theme_, mix_;
  static inline ToyModel untrained_, base_;
  static inline TrainCurve curve_;
};

TEST_F(TrainedToy, BaseLossDecreasesAndIsDeterministic) {
  ASSERT_EQ(curve_.epoch_loss.size(), 9u);
  EXPECT_LT(curve_.epoch_loss[5], curve_.epoch_loss[0]);
  EXPECT_EQ(train_base(untrained_, mix_, {8, 64, 3e-3}, 4), base_);
  EXPECT_EQ(decode_toy_model(encode_toy_model(base_)), base_);
}

TEST_F(TrainedToy, BaseSamplesCloserToMixture) {
  const Tensor c = condition_embedding(mix_.captions[0], cfg_);
  const Tensor trained = generate(base_handle(base_), c, 300, 30, 5);
  const Tensor raw = generate(base_handle(untrained_), c, 300, 30, 5);
  EXPECT_LT(energy_distance(trained, mix_.points), energy_distance(raw, mix_.points));
}

TEST_F(TrainedToy, LoraStartsAtBaseAndImproves) {
  const LoRAAdapter fresh = init_lora(base_, "t", 2, 6);
  for (const auto& ld : fresh.layers) EXPECT_EQ(frobenius_norm(ld.B), 0.0);
  Rng rng(7);
  const Tensor f = rng.gaussian_tensor({10, cfg_.input_dim()}, 1.0);
  EXPECT_EQ(velocity(attach_direct(base_, {fresh}), f), velocity(base_handle(base_), f));

  const LoRAAdapter a = train_lora(base_, theme_, "t", {2, 15, 64, 1e-2}, 8);
  const LoRAAdapter b = train_lora(base_, theme_, "t", {2, 15, 64, 1e-2}, 9);
  EXPECT_NE(a, b);
  EXPECT_EQ(a, train_lora(base_, theme_, "t", {2, 15, 64, 1e-2}, 8));
  a.validate();
  EXPECT_LT(evaluate_flow_loss(attach_direct(base_, {a}), theme_, 10),
            evaluate_flow_loss(base_handle(base_), theme_, 10));
  EXPECT_THROW(init_lora(base_, "t", 0, 1), ArgumentError);
}

}  // namespace
}  // namespace autolora
