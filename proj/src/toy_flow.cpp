#include "autolora/toy_flow.h"

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>

#include <json.hpp>

#include "autolora/adam.h"
#include "autolora/container.h"

namespace autolora {

namespace {

constexpr double kPi = std::numbers::pi;

struct Variation {
  double param;
  const char* word;
};

struct ThemeFamily {
  const char* generator;
  const char* display;
  Variation variations[3];
};

constexpr ThemeFamily kFamilies[] = {
    {"two-moons", "two moons", {{0, "upright"}, {90, "sideways"}, {180, "inverted"}}},
    {"concentric-rings", "concentric rings", {{2, "double"}, {3, "triple"}, {4, "quadruple"}}},
    {"grid", "grid", {{2, "coarse"}, {3, "medium"}, {4, "fine"}}},
    {"spiral", "spiral", {{1.0, "loose"}, {1.75, "coiled"}, {2.5, "tight"}}},
    {"gaussian-mixture", "gaussian mixture", {{3, "triad"}, {5, "pentad"}, {8, "octad"}}},
    {"checkerboard", "checkerboard", {{2, "chunky"}, {4, "tiled"}, {6, "mosaic"}}},
};

std::array<double, 2> sample_point(const ThemeSpec& th, Rng& rng) {
  const double p = th.param;
  if (th.generator == "two-moons") {
    const double u = kPi * rng.uniform();
    double x, y;
    if (rng.below(2) == 0) {
      x = std::cos(u);
      y = std::sin(u);
    } else {
      x = 1.0 - std::cos(u);
      y = 0.5 - std::sin(u);
    }
    x = 1.2 * (x - 0.5) + 0.08 * rng.gaussian();
    y = 1.2 * (y - 0.25) + 0.08 * rng.gaussian();
    const double a = p * kPi / 180.0;
    return {std::cos(a) * x - std::sin(a) * y, std::sin(a) * x + std::cos(a) * y};
  }
  if (th.generator == "concentric-rings") {
    const auto rings = static_cast<std::size_t>(p);
    const double r = 2.0 * double(rng.below(rings) + 1) / double(rings);
    const double a = 2.0 * kPi * rng.uniform();
    return {r * std::cos(a) + 0.05 * rng.gaussian(), r * std::sin(a) + 0.05 * rng.gaussian()};
  }
  if (th.generator == "grid") {
    const auto side = static_cast<std::size_t>(p);
    auto coord = [&](std::size_t i) { return side == 1 ? 0.0 : -1.5 + 3.0 * double(i) / double(side - 1); };
    const double x = coord(rng.below(side)), y = coord(rng.below(side));
    return {x + 0.1 * rng.gaussian(), y + 0.1 * rng.gaussian()};
  }
  if (th.generator == "spiral") {
    const double s = rng.uniform();
    const double r = 0.2 + 1.8 * s, a = 2.0 * kPi * p * s;
    return {r * std::cos(a) + 0.05 * rng.gaussian(), r * std::sin(a) + 0.05 * rng.gaussian()};
  }
  if (th.generator == "gaussian-mixture") {
    const auto count = static_cast<std::size_t>(p);
    const double a = 2.0 * kPi * double(rng.below(count)) / double(count);
    return {1.5 * std::cos(a) + 0.15 * rng.gaussian(), 1.5 * std::sin(a) + 0.15 * rng.gaussian()};
  }
  if (th.generator == "checkerboard") {
    const auto cells = static_cast<std::size_t>(p);
    const double w = 4.0 / double(cells);
    // Pick a dark cell uniformly: row any, column with matching parity.
    const std::size_t row = rng.below(cells);
    const std::size_t half = (cells + 1 - row % 2) / 2;
    const std::size_t col = 2 * rng.below(half) + row % 2;
    return {-2.0 + w * (double(col) + rng.uniform()), -2.0 + w * (double(row) + rng.uniform())};
  }
  throw ArgumentError("unknown generator '" + th.generator + "'");
}

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

// Batches over a shuffled permutation; the last partial batch is kept.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch) {
    out.emplace_back(order.begin() + long(s), order.begin() + long(std::min(n, s + batch)));
  }
  return out;
}

void round_model(ToyModel& m) {
  for (Tensor* t : m.parameter_list())
    for (double& v : t->values()) v = static_cast<float>(v);
}

}  // namespace

std::vector<std::string> generator_names() {
  std::vector<std::string> out;
  for (const auto& f : kFamilies) out.emplace_back(f.generator);
  return out;
}

std::vector<ThemeSpec> standard_themes() {
  std::vector<ThemeSpec> out;
  for (const auto& f : kFamilies) {
    for (const auto& v : f.variations) {
      ThemeSpec t;
      t.theme = f.generator;
      t.theme_id = std::string(f.generator) + "-" + v.word;
      t.generator = f.generator;
      t.param = v.param;
      t.variation = v.word;
      t.caption_templates = {"{variation} {theme}", "a {variation} {theme} pattern",
                             "{theme} shape, {variation} variant", "scatter plot of a {variation} {theme}"};
      t.heldout_templates = {"points forming a {variation} {theme}", "{theme} in {variation} style"};
      out.push_back(std::move(t));
    }
  }
  return out;
}

std::string fill_template(const std::string& tmpl, const ThemeSpec& theme) {
  std::string display = theme.theme;
  for (const auto& f : kFamilies) {
    if (theme.generator == f.generator) display = f.display;
  }
  std::string s = tmpl;
  replace_all(s, "{theme}", display);
  replace_all(s, "{variation}", theme.variation);
  return s;
}

ThemeSamples make_dataset(const ThemeSpec& theme, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ArgumentError("make_dataset: n must be positive");
  if (theme.caption_templates.empty()) throw ArgumentError("make_dataset: theme has no caption templates");
  Rng rng(seed);
  ThemeSamples s{Tensor::matrix(n, 2), {}};
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = sample_point(theme, rng);
    // f32 values so the JSONL form round-trips exactly.
    s.points(i, 0) = static_cast<float>(p[0]);
    s.points(i, 1) = static_cast<float>(p[1]);
    s.captions.push_back(fill_template(theme.caption_templates[i % theme.caption_templates.size()], theme));
  }
  return s;
}

FlowDataset to_flow_dataset(const ThemeSamples& samples, const ToyModelConfig& config) {
  FlowDataset d{samples.points, Tensor::matrix(samples.points.rows(), config.c_dim), samples.captions};
  std::map<std::string, Tensor> cache;
  for (std::size_t i = 0; i < samples.captions.size(); ++i) {
    auto it = cache.find(samples.captions[i]);
    if (it == cache.end()) it = cache.emplace(samples.captions[i], condition_embedding(samples.captions[i], config)).first;
    for (std::size_t j = 0; j < config.c_dim; ++j) d.conditions(i, j) = it->second[j];
  }
  return d;
}

FlowDataset concat(const std::vector<FlowDataset>& parts) {
  if (parts.empty()) throw ArgumentError("concat: no datasets");
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  const std::size_t cd = parts[0].conditions.cols();
  FlowDataset out{Tensor::matrix(n, 2), Tensor::matrix(n, cd), {}};
  std::size_t r = 0;
  for (const auto& p : parts) {
    if (p.conditions.cols() != cd) throw ArgumentError("concat: condition widths differ");
    for (std::size_t i = 0; i < p.size(); ++i, ++r) {
      for (std::size_t j = 0; j < 2; ++j) out.points(r, j) = p.points(i, j);
      for (std::size_t j = 0; j < cd; ++j) out.conditions(r, j) = p.conditions(i, j);
      out.captions.push_back(p.captions[i]);
    }
  }
  return out;
}

ToyModel train_base(ToyModel model, const FlowDataset& data, const FlowTrainConfig& config, std::uint64_t seed,
                    TrainCurve* curve) {
  if (config.epochs == 0 || config.batch_size == 0 || !(config.lr > 0)) {
    throw ArgumentError("train_base: epochs, batch_size and lr must be positive");
  }
  Rng rng(seed);
  AdamState adam(config.lr);
  auto record = [&] {
    if (curve) curve->epoch_loss.push_back(evaluate_flow_loss(base_handle(model), data, Rng::derive(seed, 1)));
  };
  if (curve) curve->epoch_loss.clear();
  record();
  for (std::size_t e = 0; e < config.epochs; ++e) {
    for (const auto& idx : epoch_batches(data.size(), config.batch_size, rng)) {
      const FlowBatch batch = draw_batch(data, idx, rng);
      FlowLoss fl = flow_matching_loss(base_handle(model), batch, {.base = true});
      std::vector<Tensor> grads;
      for (auto& l : fl.grads.base) {
        grads.push_back(std::move(l.weight));
        grads.push_back(std::move(l.bias));
      }
      adam_step(model.parameter_list(), grads, adam);
    }
    record();
  }
  round_model(model);
  return model;
}

LoRAAdapter init_lora(const ToyModel& base, const std::string& adapter_id, std::size_t rank, std::uint64_t seed) {
  if (rank == 0) throw ArgumentError("init_lora: rank must be positive");
  Rng rng(seed);
  LoRAAdapter a;
  a.adapter_id = adapter_id;
  for (const auto& e : base.lora_catalog()) {
    if (rank > std::min(e.d, e.k)) throw ArgumentError("init_lora: rank exceeds layer size");
    LayerDelta ld{e.layer_id, e.d, e.k, rank, Tensor::matrix(e.d, rank),
                  rng.gaussian_tensor({rank, e.k}, 1.0 / std::sqrt(double(e.k))), double(rank)};
    a.layers.push_back(std::move(ld));
  }
  round_to_f32(a);
  return a;
}

LoRAAdapter train_lora(const ToyModel& base, const FlowDataset& data, const std::string& adapter_id,
                       const LoraTrainConfig& config, std::uint64_t seed, TrainCurve* curve) {
  if (config.epochs == 0 || config.batch_size == 0 || !(config.lr > 0)) {
    throw ArgumentError("train_lora: epochs, batch_size and lr must be positive");
  }
  ModelHandle h = attach_direct(base, {init_lora(base, adapter_id, config.rank, Rng::derive(seed, 0))});
  Rng rng(Rng::derive(seed, 1));
  AdamState adam(config.lr);
  std::vector<Tensor*> params;
  for (auto& ld : h.adapters[0].layers) {
    params.push_back(&ld.B);
    params.push_back(&ld.A);
  }
  auto record = [&] {
    if (curve) curve->epoch_loss.push_back(evaluate_flow_loss(h, data, Rng::derive(seed, 2)));
  };
  if (curve) curve->epoch_loss.clear();
  record();
  for (std::size_t e = 0; e < config.epochs; ++e) {
    for (const auto& idx : epoch_batches(data.size(), config.batch_size, rng)) {
      const FlowBatch batch = draw_batch(data, idx, rng);
      FlowLoss fl = flow_matching_loss(h, batch, {.adapters = true});
      std::vector<Tensor> grads;
      auto& ag = fl.grads.adapters[0];
      for (std::size_t q = 0; q < ag.dB.size(); ++q) {
        grads.push_back(std::move(ag.dB[q]));
        grads.push_back(std::move(ag.dA[q]));
      }
      adam_step(params, grads, adam);
    }
    record();
  }
  LoRAAdapter out = std::move(h.adapters[0]);
  round_to_f32(out);
  return out;
}

double evaluate_flow_loss(const ModelHandle& h, const FlowDataset& data, std::uint64_t seed, std::size_t batch_size) {
  if (data.size() == 0) throw ArgumentError("evaluate_flow_loss: empty dataset");
  Rng rng(seed);
  double total = 0.0;
  for (std::size_t s = 0; s < data.size(); s += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(data.size(), s + batch_size); ++i) idx.push_back(i);
    total += flow_matching_loss(h, draw_batch(data, idx, rng)).loss * double(idx.size());
  }
  return total / double(data.size());
}

Tensor integrate(const ModelHandle& h, const Tensor& c, Tensor x, std::size_t steps) {
  if (steps == 0) throw ArgumentError("generate: steps must be positive");
  const double dt = 1.0 / double(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::vector<double> t(x.rows(), double(s) * dt);
    const Tensor v = velocity(h, featurize(x, t, c, h.base->config));
    x += v * dt;
  }
  require_finite(x, "generate");
  return x;
}

Tensor generate(const ModelHandle& h, const Tensor& c, std::size_t n, std::size_t steps, std::uint64_t seed) {
  if (n == 0) throw ArgumentError("generate: n must be positive");
  Rng rng(seed);
  return integrate(h, c, rng.gaussian_tensor({n, 2}, 1.0), steps);
}

double energy_distance(const Tensor& x, const Tensor& y) {
  if (x.rows() == 0 || y.rows() == 0) throw ArgumentError("energy_distance: empty sample set");
  if (x.cols() != y.cols()) throw ArgumentError("energy_distance: dimensions differ");
  auto mean_dist = [](const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      const double* ai = a.row(i).data();
      for (std::size_t j = 0; j < b.rows(); ++j) {
        const double* bj = b.row(j).data();
        double d2 = 0.0;
        for (std::size_t q = 0; q < a.cols(); ++q) d2 += (ai[q] - bj[q]) * (ai[q] - bj[q]);
        s += std::sqrt(d2);
      }
    }
    return s / (double(a.rows()) * double(b.rows()));
  };
  // Clamp rounding noise; the V-statistic is non-negative.
  return std::max(0.0, 2.0 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y));
}

double eval_sample_quality(const Tensor& samples, const ThemeSpec& theme, std::uint64_t seed, std::size_t n_ref) {
  return energy_distance(samples, make_dataset(theme, n_ref, seed).points);
}

void write_dataset_jsonl(const std::filesystem::path& path, const ThemeSamples& samples) {
  std::string out;
  for (std::size_t i = 0; i < samples.points.rows(); ++i) {
    nlohmann::json j = {{"x", {static_cast<float>(samples.points(i, 0)), static_cast<float>(samples.points(i, 1))}},
                        {"caption", samples.captions.at(i)}};
    out += j.dump() + "\n";
  }
  write_file_bytes(path, out);
}

ThemeSamples read_dataset_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::array<double, 2>> pts;
  ThemeSamples s;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      pts.push_back({j.at("x").at(0).get<double>(), j.at("x").at(1).get<double>()});
      s.captions.push_back(j.at("caption").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(FormatError::Kind::Manifest, path.string() + ": bad dataset line: " + e.what());
    }
  }
  s.points = Tensor::matrix(pts.size(), 2);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    s.points(i, 0) = pts[i][0];
    s.points(i, 1) = pts[i][1];
  }
  return s;
}

void write_samples_csv(const std::filesystem::path& path, const Tensor& samples) {
  std::string out = "x,y\n";
  char buf[64];
  for (std::size_t i = 0; i < samples.rows(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g\n", samples(i, 0), samples(i, 1));
    out += buf;
  }
  write_file_bytes(path, out);
}

}  // namespace autolora
