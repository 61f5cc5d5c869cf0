#include "autolora/encoder.h"

#include <cmath>
#include <set>

#include "autolora/container.h"
#include "autolora/hash.h"

namespace autolora {

namespace {

constexpr std::string_view kMagic = "LENC";

void check_catalog(const LayerCatalog& catalog) {
  if (catalog.empty()) throw ArgumentError("encoder catalog is empty");
  std::set<std::string> ids;
  for (const CatalogEntry& e : catalog) {
    if (e.layer_id.empty() || e.d == 0 || e.k == 0) throw ArgumentError("invalid catalog entry '" + e.layer_id + "'");
    if (!ids.insert(e.layer_id).second) throw ArgumentError("duplicate catalog layer '" + e.layer_id + "'");
  }
}

// Structure without values; used by zeros_like and decoding.
EncoderParams skeleton(const LayerCatalog& catalog, const EncoderConfig& config) {
  EncoderParams p;
  p.config = config;
  p.catalog = catalog;
  for (const CatalogEntry& e : catalog) {
    p.tokens.push_back({Tensor::vector(e.k), Tensor::matrix(e.d, config.out_dim)});
  }
  p.positions = Tensor::matrix(catalog.size(), config.out_dim);
  p.cls = Tensor::vector(config.out_dim);
  for (std::size_t b = 0; b < config.blocks; ++b) {
    p.blocks.push_back(AttentionBlockParams::zeros(config.out_dim, config.heads, config.mlp_hidden));
  }
  return p;
}

struct TokenTrace {
  Tensor aq;  // A q
  Tensor u;   // (alpha/r) B A q
  Tensor v;   // u^T W_hat
};

TokenTrace trace_token(const LayerDelta& ld, const Tensor& q, const Tensor& w_hat) {
  TokenTrace t{Tensor::vector(ld.r), Tensor::vector(ld.d), Tensor::vector(w_hat.cols())};
  for (std::size_t i = 0; i < ld.r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < ld.k; ++j) s += ld.A(i, j) * q[j];
    t.aq[i] = s;
  }
  const double scale = ld.scale();
  for (std::size_t row = 0; row < ld.d; ++row) {
    double s = 0.0;
    for (std::size_t i = 0; i < ld.r; ++i) s += ld.B(row, i) * t.aq[i];
    t.u[row] = s * scale;
  }
  for (std::size_t row = 0; row < ld.d; ++row)
    for (std::size_t col = 0; col < t.v.size(); ++col) t.v[col] += t.u[row] * w_hat(row, col);
  return t;
}

}  // namespace

EncoderParams EncoderParams::zeros_like() const { return skeleton(catalog, config); }

std::size_t EncoderParams::catalog_index(const std::string& layer_id) const {
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    if (catalog[i].layer_id == layer_id) return i;
  }
  throw UnknownLayer("layer '" + layer_id + "' is not in the encoder catalog");
}

std::vector<Tensor*> EncoderParams::parameter_list() {
  std::vector<Tensor*> out;
  visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

EncoderParams init_encoder(const LayerCatalog& catalog, const EncoderConfig& config, std::uint64_t seed) {
  check_catalog(catalog);
  if (config.out_dim == 0 || config.blocks == 0 || config.heads == 0 || config.mlp_hidden == 0 ||
      config.out_dim % config.heads != 0) {
    throw ArgumentError("invalid encoder config");
  }
  Rng rng(seed);
  EncoderParams p = skeleton(catalog, config);
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    const auto& e = catalog[i];
    p.tokens[i].q = rng.gaussian_tensor({e.k}, 1.0 / std::sqrt(static_cast<double>(e.k)));
    p.tokens[i].w_hat = rng.gaussian_tensor({e.d, config.out_dim}, 1.0 / std::sqrt(static_cast<double>(e.d)));
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(config.out_dim));
  p.positions = rng.gaussian_tensor({catalog.size(), config.out_dim}, s);
  p.cls = rng.gaussian_tensor({config.out_dim}, s);
  for (auto& block : p.blocks) block = AttentionBlockParams::init(config.out_dim, config.heads, config.mlp_hidden, rng);
  return p;
}

Tensor token_embed(const LayerDelta& ld, const Tensor& q, const Tensor& w_hat) {
  ld.validate();
  if (q.size() != ld.k || w_hat.rank() != 2 || w_hat.rows() != ld.d) {
    throw ArgumentError("token_embed: layer '" + ld.layer_id + "' does not match q " + q.shape_string() +
                        " / W_hat " + w_hat.shape_string());
  }
  return trace_token(ld, q, w_hat).v;
}

TokenGrads token_embed_backward(const LayerDelta& ld, const Tensor& q, const Tensor& w_hat, const Tensor& dv) {
  ld.validate();
  if (q.size() != ld.k || w_hat.rank() != 2 || w_hat.rows() != ld.d || dv.size() != w_hat.cols()) {
    throw ArgumentError("token_embed_backward: shape mismatch for layer '" + ld.layer_id + "'");
  }
  const TokenTrace t = trace_token(ld, q, w_hat);
  TokenGrads g{Tensor::vector(ld.k), Tensor({ld.d, w_hat.cols()})};
  Tensor du = Tensor::vector(ld.d);
  for (std::size_t row = 0; row < ld.d; ++row) {
    double s = 0.0;
    for (std::size_t col = 0; col < dv.size(); ++col) {
      g.dw_hat(row, col) = t.u[row] * dv[col];
      s += w_hat(row, col) * dv[col];
    }
    du[row] = s;
  }
  const double scale = ld.scale();
  for (std::size_t i = 0; i < ld.r; ++i) {
    double daq = 0.0;
    for (std::size_t row = 0; row < ld.d; ++row) daq += ld.B(row, i) * du[row];
    daq *= scale;
    for (std::size_t j = 0; j < ld.k; ++j) g.dq[j] += ld.A(i, j) * daq;
  }
  return g;
}

Tensor encode_lora(const LoRAAdapter& adapter, const EncoderParams& params, EncodeCache* cache) {
  EncodeCache local;
  EncodeCache& c = cache ? *cache : local;
  c = EncodeCache{};

  std::vector<const LayerDelta*> by_position(params.catalog.size(), nullptr);
  for (const LayerDelta& ld : adapter.layers) {
    const std::size_t idx = params.catalog_index(ld.layer_id);
    if (params.catalog[idx].d != ld.d || params.catalog[idx].k != ld.k) {
      throw ArgumentError("layer '" + ld.layer_id + "' dims differ from the encoder catalog");
    }
    by_position[idx] = &ld;
  }

  const std::size_t dim = params.config.out_dim;
  std::vector<std::vector<double>> token_rows;
  for (std::size_t idx = 0; idx < by_position.size(); ++idx) {
    const LayerDelta* ld = by_position[idx];
    if (!ld) continue;
    ld->validate();
    TokenTrace trace = trace_token(*ld, params.tokens[idx].q, params.tokens[idx].w_hat);
    std::vector<double> v(dim);
    for (std::size_t col = 0; col < dim; ++col) v[col] = trace.v[col] + params.positions(idx, col);
    token_rows.push_back(std::move(v));
    c.present.push_back(idx);
    c.deltas.push_back(ld);
    c.aq.push_back(std::move(trace.aq));
    c.u.push_back(std::move(trace.u));
  }

  Tensor x = Tensor::matrix(token_rows.size() + 1, dim);
  for (std::size_t col = 0; col < dim; ++col) x(0, col) = params.cls[col];
  for (std::size_t t = 0; t < token_rows.size(); ++t)
    for (std::size_t col = 0; col < dim; ++col) x(t + 1, col) = token_rows[t][col];

  c.blocks.resize(params.blocks.size());
  for (std::size_t b = 0; b < params.blocks.size(); ++b) x = attention_block(x, params.blocks[b], &c.blocks[b]);

  c.raw = Tensor::vector(dim);
  double norm = 0.0;
  for (std::size_t col = 0; col < dim; ++col) {
    c.raw[col] = x(0, col);
    norm += x(0, col) * x(0, col);
  }
  c.norm = std::sqrt(norm);
  if (!(c.norm > 0.0) || !std::isfinite(c.norm)) throw NumericError("encode_lora: degenerate embedding");
  Tensor e = c.raw * (1.0 / c.norm);
  return e;
}

void encode_lora_backward(const Tensor& grad_embedding, const EncoderParams& params, const EncodeCache& c,
                          EncoderParams& grads) {
  const std::size_t dim = params.config.out_dim;
  if (grad_embedding.size() != dim) throw ArgumentError("encode_lora_backward: gradient size mismatch");

  // e = raw / |raw|
  double dot = 0.0;
  for (std::size_t i = 0; i < dim; ++i) dot += grad_embedding[i] * c.raw[i];
  dot /= c.norm * c.norm;
  Tensor dx = Tensor::matrix(c.present.size() + 1, dim);
  for (std::size_t i = 0; i < dim; ++i) dx(0, i) = (grad_embedding[i] - c.raw[i] * dot) / c.norm;

  for (std::size_t b = params.blocks.size(); b-- > 0;) {
    dx = attention_block_backward(dx, params.blocks[b], c.blocks[b], grads.blocks[b]);
  }

  for (std::size_t i = 0; i < dim; ++i) grads.cls[i] += dx(0, i);
  for (std::size_t t = 0; t < c.present.size(); ++t) {
    const std::size_t idx = c.present[t];
    const LayerDelta& ld = *c.deltas[t];
    const TokenParams& tp = params.tokens[idx];
    TokenParams& g = grads.tokens[idx];
    auto dv = dx.row(t + 1);
    for (std::size_t col = 0; col < dim; ++col) grads.positions(idx, col) += dv[col];
    Tensor du = Tensor::vector(ld.d);
    for (std::size_t row = 0; row < ld.d; ++row) {
      double s = 0.0;
      for (std::size_t col = 0; col < dim; ++col) {
        g.w_hat(row, col) += c.u[t][row] * dv[col];
        s += tp.w_hat(row, col) * dv[col];
      }
      du[row] = s;
    }
    Tensor daq = Tensor::vector(ld.r);
    for (std::size_t i = 0; i < ld.r; ++i) {
      double s = 0.0;
      for (std::size_t row = 0; row < ld.d; ++row) s += ld.B(row, i) * du[row];
      daq[i] = s * ld.scale();
    }
    for (std::size_t j = 0; j < ld.k; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < ld.r; ++i) s += ld.A(i, j) * daq[i];
      g.q[j] += s;
    }
  }
}

std::vector<Tensor> encode_pool(const std::vector<LoRAAdapter>& pool, const EncoderParams& params) {
  std::vector<Tensor> out;
  out.reserve(pool.size());
  for (const LoRAAdapter& a : pool) out.push_back(encode_lora(a, params));
  return out;
}

std::string encode_encoder(const EncoderParams& params) {
  Container c;
  nlohmann::json tensors = nlohmann::json::array();
  const_cast<EncoderParams&>(params).visit([&](const std::string& name, Tensor& t) {
    const std::uint64_t offset = append_tensor(c.payload, t);
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
  });
  nlohmann::json catalog = nlohmann::json::array();
  for (const CatalogEntry& e : params.catalog) catalog.push_back({{"layer_id", e.layer_id}, {"d", e.d}, {"k", e.k}});
  const EncoderConfig& cfg = params.config;
  c.manifest = {{"config",
                 {{"out_dim", cfg.out_dim}, {"blocks", cfg.blocks}, {"heads", cfg.heads}, {"mlp_hidden", cfg.mlp_hidden}}},
                {"catalog", catalog},
                {"tensors", tensors}};
  return encode_container(kMagic, c);
}

EncoderParams decode_encoder(std::string_view bytes) {
  Container c = decode_container(kMagic, bytes);
  try {
    const auto& cfg = c.manifest.at("config");
    EncoderConfig config{cfg.at("out_dim").get<std::size_t>(), cfg.at("blocks").get<std::size_t>(),
                         cfg.at("heads").get<std::size_t>(), cfg.at("mlp_hidden").get<std::size_t>()};
    LayerCatalog catalog;
    for (const auto& e : c.manifest.at("catalog")) {
      catalog.push_back({e.at("layer_id").get<std::string>(), e.at("d").get<std::size_t>(), e.at("k").get<std::size_t>()});
    }
    check_catalog(catalog);
    EncoderParams p = skeleton(catalog, config);
    const auto& tensors = c.manifest.at("tensors");
    std::size_t i = 0;
    std::size_t consumed = 0;
    p.visit([&](const std::string& name, Tensor& t) {
      if (i >= tensors.size() || tensors[i].at("name").get<std::string>() != name) {
        throw FormatError(FormatError::Kind::Manifest, "LENC: expected tensor '" + name + "'");
      }
      if (tensors[i].at("shape").get<std::vector<std::size_t>>() != t.shape()) {
        throw FormatError(FormatError::Kind::Manifest, "LENC: tensor '" + name + "' has the wrong shape");
      }
      t = read_tensor(c.payload, tensors[i].at("offset").get<std::uint64_t>(), t.shape());
      consumed += t.size();
      ++i;
    });
    if (i != tensors.size() || consumed != c.payload.size()) {
      throw FormatError(FormatError::Kind::LengthMismatch, "LENC: manifest and payload disagree");
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::Manifest, std::string("LENC: malformed manifest: ") + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError(FormatError::Kind::Manifest, std::string("LENC: ") + e.what());
  }
}

void save_encoder(const EncoderParams& params, const std::filesystem::path& path) {
  write_file_bytes(path, encode_encoder(params));
}

EncoderParams load_encoder(const std::filesystem::path& path) { return decode_encoder(read_file_bytes(path)); }

std::string encoder_fingerprint(const EncoderParams& params) { return hex64(fnv1a64(encode_encoder(params))); }

LayerCatalog catalog_from_adapters(const std::vector<LoRAAdapter>& adapters) {
  LayerCatalog catalog;
  for (const LoRAAdapter& a : adapters) {
    for (const LayerDelta& ld : a.layers) {
      bool known = false;
      for (const CatalogEntry& e : catalog) known |= e.layer_id == ld.layer_id;
      if (!known) catalog.push_back({ld.layer_id, ld.d, ld.k});
    }
  }
  return catalog;
}

}  // namespace autolora
