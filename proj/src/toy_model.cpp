#include "autolora/toy_model.h"

#include <cmath>
#include <map>
#include <mutex>
#include <numbers>

#include "autolora/container.h"
#include "autolora/rng.h"

namespace autolora {

namespace {

constexpr std::string_view kMagic = "LTOY";
constexpr std::uint64_t kConditionSeedStream = 0xc0d17104;

nlohmann::json config_to_json(const ToyModelConfig& c) {
  return {{"hidden_layers", c.hidden_layers},
          {"width", c.width},
          {"c_dim", c.c_dim},
          {"time_freqs", c.time_freqs},
          {"text", {{"out_dim", c.text.out_dim}, {"buckets", c.text.buckets}, {"seed", c.text.seed}}}};
}

ToyModelConfig config_from_json(const nlohmann::json& j) {
  ToyModelConfig c;
  c.hidden_layers = j.at("hidden_layers").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.c_dim = j.at("c_dim").get<std::size_t>();
  c.time_freqs = j.at("time_freqs").get<std::size_t>();
  c.text.out_dim = j.at("text").at("out_dim").get<std::size_t>();
  c.text.buckets = j.at("text").at("buckets").get<std::size_t>();
  c.text.seed = j.at("text").at("seed").get<std::uint64_t>();
  return c;
}

std::string hidden_name(std::size_t i) { return "fc" + std::to_string(i); }

}  // namespace

LayerCatalog ToyModel::lora_catalog() const {
  LayerCatalog cat;
  for (std::size_t i = 0; i < hidden_count(); ++i) {
    cat.push_back({layers[i].name, layers[i].weight.rows(), layers[i].weight.cols()});
  }
  return cat;
}

WeightMap ToyModel::hosted_weights() const {
  WeightMap w;
  for (std::size_t i = 0; i < hidden_count(); ++i) w[layers[i].name] = layers[i].weight;
  return w;
}

const DenseLayer& ToyModel::layer(const std::string& name) const {
  for (const auto& l : layers) {
    if (l.name == name) return l;
  }
  throw UnknownLayer("toy model has no layer '" + name + "'");
}

std::vector<Tensor*> ToyModel::parameter_list() {
  std::vector<Tensor*> out;
  for (auto& l : layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

ToyModel init_toy_model(const ToyModelConfig& config, std::uint64_t seed) {
  if (config.hidden_layers == 0 || config.width == 0 || config.c_dim == 0) {
    throw ArgumentError("toy model: hidden_layers, width and c_dim must be positive");
  }
  Rng rng(seed);
  ToyModel m{config, {}};
  std::size_t in = config.input_dim();
  for (std::size_t i = 0; i <= config.hidden_layers; ++i) {
    const bool head = i == config.hidden_layers;
    const std::size_t out = head ? 2 : config.width;
    DenseLayer l{head ? "head" : hidden_name(i), rng.gaussian_tensor({out, in}, 1.0 / std::sqrt(double(in))),
                 Tensor::vector(out)};
    // Small head so the untrained field starts near zero.
    if (head) l.weight *= 0.1;
    m.layers.push_back(std::move(l));
    in = out;
  }
  return m;
}

Tensor condition_embedding(const std::string& caption, const ToyModelConfig& config) {
  static std::mutex mu;
  static std::map<std::pair<std::size_t, std::uint64_t>, Tensor> projections;
  const Tensor e = embed_text(caption, config.text);
  const Tensor* proj;
  {
    std::lock_guard lock(mu);
    auto key = std::make_pair(config.c_dim, config.text.seed);
    auto it = projections.find(key);
    if (it == projections.end()) {
      Rng rng(Rng::derive(config.text.seed, kConditionSeedStream));
      it = projections.emplace(key, rng.gaussian_tensor({config.c_dim, e.size()}, 1.0)).first;
    }
    proj = &it->second;
  }
  Tensor c = Tensor::matrix(1, config.c_dim);
  for (std::size_t i = 0; i < config.c_dim; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < e.size(); ++j) s += (*proj)(i, j) * e[j];
    c(0, i) = s;
  }
  return c;
}

Tensor featurize(const Tensor& x, const std::vector<double>& t, const Tensor& c, const ToyModelConfig& config) {
  if (x.rank() != 2 || x.cols() != 2) throw ArgumentError("featurize: x must be n x 2, got " + x.shape_string());
  const std::size_t n = x.rows();
  if (t.size() != n) throw ArgumentError("featurize: need one t per sample");
  if (c.cols() != config.c_dim || (c.rows() != 1 && c.rows() != n)) {
    throw ArgumentError("featurize: condition must be 1 x c_dim or n x c_dim, got " + c.shape_string());
  }
  Tensor f = Tensor::matrix(n, config.input_dim());
  for (std::size_t i = 0; i < n; ++i) {
    auto row = f.row(i);
    std::size_t j = 0;
    row[j++] = x(i, 0);
    row[j++] = x(i, 1);
    row[j++] = t[i];
    for (std::size_t q = 1; q <= config.time_freqs; ++q) {
      const double a = 2.0 * std::numbers::pi * double(q) * t[i];
      row[j++] = std::sin(a);
      row[j++] = std::cos(a);
    }
    const std::size_t cr = c.rows() == 1 ? 0 : i;
    for (std::size_t q = 0; q < config.c_dim; ++q) row[j++] = c(cr, q);
  }
  return f;
}

std::string encode_toy_model(const ToyModel& model) {
  Container c;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : model.layers) {
    const auto w_off = append_tensor(c.payload, l.weight);
    const auto b_off = append_tensor(c.payload, l.bias);
    layers.push_back({{"name", l.name},
                      {"out", l.weight.rows()},
                      {"in", l.weight.cols()},
                      {"w_offset", w_off},
                      {"b_offset", b_off}});
  }
  c.manifest = {{"config", config_to_json(model.config)}, {"layers", layers}};
  return encode_container(kMagic, c);
}

ToyModel decode_toy_model(std::string_view bytes) {
  Container c = decode_container(kMagic, bytes);
  ToyModel m;
  try {
    m.config = config_from_json(c.manifest.at("config"));
    for (const auto& j : c.manifest.at("layers")) {
      const auto out = j.at("out").get<std::size_t>(), in = j.at("in").get<std::size_t>();
      m.layers.push_back({j.at("name").get<std::string>(),
                          read_tensor(c.payload, j.at("w_offset").get<std::uint64_t>(), {out, in}),
                          read_tensor(c.payload, j.at("b_offset").get<std::uint64_t>(), {out})});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::Manifest, std::string("LTOY: malformed manifest: ") + e.what());
  }
  if (m.layers.size() != m.config.hidden_layers + 1) {
    throw FormatError(FormatError::Kind::Shape, "LTOY: layer count does not match config");
  }
  return m;
}

void save_toy_model(const ToyModel& model, const std::filesystem::path& path) {
  write_file_bytes(path, encode_toy_model(model));
}

ToyModel load_toy_model(const std::filesystem::path& path) { return decode_toy_model(read_file_bytes(path)); }

}  // namespace autolora
