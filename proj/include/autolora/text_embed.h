#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "autolora/tensor.h"

namespace autolora {

// Deterministic stand-in for a frozen text encoder: lowercase, character
// 3-gram counts hashed into `buckets`, a fixed seeded Gaussian projection to
// out_dim, then L2 normalization.
struct TextConfig {
  std::size_t out_dim = 64;
  std::size_t buckets = 4096;
  std::uint64_t seed = 1;
  bool operator==(const TextConfig&) const = default;
};

class TextEmbedder {
 public:
  explicit TextEmbedder(TextConfig config);

  const TextConfig& config() const { return config_; }
  Tensor embed(const std::string& caption) const;
  // Bucketed 3-gram counts before projection.
  std::vector<double> ngram_counts(const std::string& caption) const;

 private:
  TextConfig config_;
  Tensor projection_;  // buckets x out_dim
};

// Uses a process-wide embedder per config.
Tensor embed_text(const std::string& caption, const TextConfig& config = {});

// A caption for one adapter, optionally with a precomputed text embedding
// that replaces the stub.
struct CaptionPair {
  std::string adapter_id;
  std::string caption;
  std::optional<std::vector<double>> embedding;
};

// Precomputed embedding (normalized) when present, otherwise the stub.
Tensor caption_embedding(const CaptionPair& pair, const TextConfig& config);

// JSON lines: {"adapter_id", "caption", optional "embedding": [floats]}.
std::vector<CaptionPair> read_caption_pairs(const std::filesystem::path& path);
void write_caption_pairs(const std::filesystem::path& path, const std::vector<CaptionPair>& pairs);

}  // namespace autolora
