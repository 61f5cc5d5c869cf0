#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "autolora/encoder.h"
#include "autolora/text_embed.h"

namespace autolora {

// ---------------------------------------------------------------------------
// Symmetric contrastive loss over an N x N similarity matrix S = scale E T^T:
//   L = sum_i [ -log softmax_row(S)_ii - log softmax_col(S)_ii ]

struct ContrastiveResult {
  double loss = 0.0;
  std::vector<double> row_terms;  // -log softmax_row(S)_ii
  std::vector<double> col_terms;  // -log softmax_col(S)_ii
  Tensor grad_e;                  // dL/dE
  Tensor grad_t;                  // dL/dT
  double grad_log_scale = 0.0;    // dL/d(log scale)
};

ContrastiveResult contrastive_loss(const Tensor& E, const Tensor& T, double scale = 1.0);

// ---------------------------------------------------------------------------
// Exact cosine index.

struct RetrievalIndex {
  std::size_t out_dim = 0;
  std::vector<std::string> ids;
  Tensor embeddings;  // count x out_dim, unit rows, f32-representable
  std::string encoder_fingerprint;

  std::size_t size() const { return ids.size(); }
};

using ScoredId = std::pair<std::string, double>;

RetrievalIndex build_index(const std::vector<LoRAAdapter>& pool, const EncoderParams& params);
// Encodes and inserts new adapters without touching existing rows. The
// encoder must be the one the index was built with.
void append_to_index(RetrievalIndex& index, const std::vector<LoRAAdapter>& adapters, const EncoderParams& params);

// Exact cosine top-k, descending score, ties by adapter id.
std::vector<ScoredId> query_topk(const RetrievalIndex& index, const Tensor& query, std::size_t k);

// LIDX container: manifest {out_dim, count, ids, encoder_fingerprint}.
void save_index(const RetrievalIndex& index, const std::filesystem::path& path);
RetrievalIndex load_index(const std::filesystem::path& path);

struct Heatmap {
  Tensor similarity;  // count x count cosine matrix
  double intra_mean = 0.0;  // NaN when no same-group pairs exist
  double inter_mean = 0.0;  // NaN when no cross-group pairs exist
};

// grouping maps every index id to its theme.
Heatmap similarity_heatmap(const RetrievalIndex& index, const std::map<std::string, std::string>& grouping);

// ---------------------------------------------------------------------------
// Retriever training.

struct RetrieverConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 18;  // clipped to the number of adapters with captions
  double lr = 1e-3;
  bool learnable_temperature = false;
  EncoderConfig encoder;
  TextConfig text;
};

struct RetrieverEpoch {
  std::size_t epoch = 0;   // 0 is the untrained encoder
  double train_loss = 0.0; // mean batch loss over the epoch (NaN at epoch 0)
  double eval_loss = 0.0;  // all adapters, each with its first training caption
  double heldout_recall_at_1 = 0.0;  // NaN without held-out captions
};

struct RetrieverResult {
  EncoderParams params;
  std::vector<RetrieverEpoch> metrics;
};

RetrieverResult train_retriever(const std::vector<LoRAAdapter>& pool, const std::vector<CaptionPair>& train_pairs,
                                const std::vector<CaptionPair>& heldout_pairs, const RetrieverConfig& config,
                                std::uint64_t seed);

// Fraction of captions whose adapter appears in the top-k of the index.
double recall_at_k(const RetrievalIndex& index, const std::vector<CaptionPair>& pairs, const TextConfig& text,
                   std::size_t k);

// One JSON object per line.
std::string retriever_metrics_jsonl(const std::vector<RetrieverEpoch>& metrics);

}  // namespace autolora
