#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "autolora/attention.h"
#include "autolora/lora.h"
#include "autolora/rng.h"

namespace autolora {

// An adapter layer that the encoder's catalog does not know.
class UnknownLayer : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CatalogEntry {
  std::string layer_id;
  std::size_t d = 0;
  std::size_t k = 0;
  bool operator==(const CatalogEntry&) const = default;
};
using LayerCatalog = std::vector<CatalogEntry>;

struct EncoderConfig {
  std::size_t out_dim = 64;
  std::size_t blocks = 4;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 128;
  bool operator==(const EncoderConfig&) const = default;
};

// Per-layer token parameters: v = ((alpha/r) B A q)^T W_hat.
struct TokenParams {
  Tensor q;      // k
  Tensor w_hat;  // d x out_dim
};

struct EncoderParams {
  EncoderConfig config;
  LayerCatalog catalog;
  std::vector<TokenParams> tokens;  // parallel to catalog
  Tensor positions;                 // catalog size x out_dim, indexed by catalog position
  Tensor cls;                       // out_dim
  std::vector<AttentionBlockParams> blocks;
  // Log of the contrastive logit scale. Only read when the retriever is
  // configured with a learnable temperature; embeddings never depend on it.
  Tensor log_scale = Tensor::vector(1);

  // Same shapes, all zeros.
  EncoderParams zeros_like() const;
  std::size_t catalog_index(const std::string& layer_id) const;

  template <typename F>
  void visit(F&& f) {
    for (std::size_t i = 0; i < catalog.size(); ++i) {
      f("layer." + catalog[i].layer_id + ".q", tokens[i].q);
      f("layer." + catalog[i].layer_id + ".w_hat", tokens[i].w_hat);
    }
    f(std::string("positions"), positions);
    f(std::string("cls"), cls);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      blocks[b].visit([&](const char* name, Tensor& t) { f("block" + std::to_string(b) + "." + name, t); });
    }
    f(std::string("log_scale"), log_scale);
  }
  std::vector<Tensor*> parameter_list();
};

EncoderParams init_encoder(const LayerCatalog& catalog, const EncoderConfig& config, std::uint64_t seed);

// Token embedding of one layer, evaluated as B (A q) so the d x k delta is
// never formed.
Tensor token_embed(const LayerDelta& ld, const Tensor& q, const Tensor& w_hat);

struct TokenGrads {
  Tensor dq;
  Tensor dw_hat;
};

// Gradients of token_embed w.r.t. q and W_hat given dLoss/dv. The adapter
// factors are treated as constants.
TokenGrads token_embed_backward(const LayerDelta& ld, const Tensor& q, const Tensor& w_hat, const Tensor& dv);

struct EncodeCache {
  std::vector<std::size_t> present;  // catalog indices of the adapter's layers, in catalog order
  std::vector<const LayerDelta*> deltas;
  std::vector<Tensor> aq;  // A q, length r
  std::vector<Tensor> u;   // (alpha/r) B A q, length d
  std::vector<AttentionBlockCache> blocks;
  Tensor raw;  // final CLS state before normalization
  double norm = 0.0;
};

// Unit-norm embedding of an adapter: catalog-ordered tokens (layers the
// adapter lacks are omitted) plus learned positions, a CLS token in front,
// the transformer blocks, then the normalized CLS state.
Tensor encode_lora(const LoRAAdapter& adapter, const EncoderParams& params, EncodeCache* cache = nullptr);

// Accumulates dLoss/dparams into grads given dLoss/de for the returned
// embedding. The adapter must outlive the cache.
void encode_lora_backward(const Tensor& grad_embedding, const EncoderParams& params, const EncodeCache& cache,
                          EncoderParams& grads);

std::vector<Tensor> encode_pool(const std::vector<LoRAAdapter>& pool, const EncoderParams& params);

// LENC container: manifest {"config", "catalog", "tensors": [{name, shape, offset}]}.
void save_encoder(const EncoderParams& params, const std::filesystem::path& path);
EncoderParams load_encoder(const std::filesystem::path& path);
std::string encode_encoder(const EncoderParams& params);
EncoderParams decode_encoder(std::string_view bytes);

// Hash of the serialized parameters.
std::string encoder_fingerprint(const EncoderParams& params);

// Catalog covering every layer of the given adapters, first-seen order.
LayerCatalog catalog_from_adapters(const std::vector<LoRAAdapter>& adapters);

}  // namespace autolora
