#include "autolora/text_embed.h"

#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "autolora/hash.h"
#include "autolora/rng.h"

namespace autolora {

namespace {

Tensor normalized(Tensor v, const std::string& what) {
  double n = 0.0;
  for (double x : v.values()) n += x * x;
  n = std::sqrt(n);
  if (!(n > 0.0) || !std::isfinite(n)) throw NumericError(what + ": cannot normalize a zero vector");
  return v * (1.0 / n);
}

}  // namespace

TextEmbedder::TextEmbedder(TextConfig config) : config_(config) {
  if (config_.out_dim == 0 || config_.buckets == 0) throw ArgumentError("TextEmbedder: dimensions must be positive");
  Rng rng(config_.seed);
  projection_ = rng.gaussian_tensor({config_.buckets, config_.out_dim}, 1.0);
}

std::vector<double> TextEmbedder::ngram_counts(const std::string& caption) const {
  if (caption.empty()) throw ArgumentError("embed_text: empty caption");
  std::string lower(caption.size(), ' ');
  for (std::size_t i = 0; i < caption.size(); ++i) {
    lower[i] = static_cast<char>(std::tolower(static_cast<unsigned char>(caption[i])));
  }
  std::vector<double> counts(config_.buckets, 0.0);
  if (lower.size() < 3) {
    counts[fnv1a64(lower) % config_.buckets] += 1.0;
    return counts;
  }
  for (std::size_t i = 0; i + 3 <= lower.size(); ++i) {
    counts[fnv1a64(std::string_view(lower).substr(i, 3)) % config_.buckets] += 1.0;
  }
  return counts;
}

Tensor TextEmbedder::embed(const std::string& caption) const {
  const std::vector<double> counts = ngram_counts(caption);
  Tensor v = Tensor::vector(config_.out_dim);
  for (std::size_t b = 0; b < counts.size(); ++b) {
    if (counts[b] == 0.0) continue;
    for (std::size_t c = 0; c < config_.out_dim; ++c) v[c] += counts[b] * projection_(b, c);
  }
  return normalized(std::move(v), "embed_text");
}

Tensor embed_text(const std::string& caption, const TextConfig& config) {
  static std::mutex mu;
  static std::map<std::tuple<std::size_t, std::size_t, std::uint64_t>, std::unique_ptr<TextEmbedder>> cache;
  const TextEmbedder* embedder = nullptr;
  {
    std::lock_guard<std::mutex> lock(mu);
    auto& slot = cache[{config.out_dim, config.buckets, config.seed}];
    if (!slot) slot = std::make_unique<TextEmbedder>(config);
    embedder = slot.get();
  }
  return embedder->embed(caption);
}

Tensor caption_embedding(const CaptionPair& pair, const TextConfig& config) {
  if (pair.embedding) {
    if (pair.embedding->size() != config.out_dim) {
      throw ArgumentError("caption embedding for '" + pair.adapter_id + "' has dimension " +
                          std::to_string(pair.embedding->size()) + ", expected " + std::to_string(config.out_dim));
    }
    return normalized(Tensor({config.out_dim}, *pair.embedding), "caption embedding");
  }
  return embed_text(pair.caption, config);
}

std::vector<CaptionPair> read_caption_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<CaptionPair> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      CaptionPair p;
      p.adapter_id = j.at("adapter_id").get<std::string>();
      p.caption = j.value("caption", std::string());
      if (j.contains("embedding")) p.embedding = j.at("embedding").get<std::vector<double>>();
      if (p.caption.empty() && !p.embedding) throw ArgumentError("caption and embedding both missing");
      pairs.push_back(std::move(p));
    } catch (const std::exception& e) {
      throw ArgumentError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return pairs;
}

void write_caption_pairs(const std::filesystem::path& path, const std::vector<CaptionPair>& pairs) {
  std::ostringstream out;
  for (const CaptionPair& p : pairs) {
    nlohmann::json j = {{"adapter_id", p.adapter_id}, {"caption", p.caption}};
    if (p.embedding) j["embedding"] = *p.embedding;
    out << j.dump() << '\n';
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << out.str();
}

}  // namespace autolora
