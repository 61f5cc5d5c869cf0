#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "autolora/fusion_trainer.h"
#include "autolora/retriever.h"

namespace autolora {

// Raised for invalid configs and command arguments (exit code 2).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ToySection {
  ToyModelConfig model;
  std::vector<std::string> themes;  // generator names; all six by default
  std::size_t samples = 1000;       // training points per adapter
  std::size_t heldout_samples = 400;
  // Condition used for every row while training the base model, so the
  // themes live in the adapters. Empty: each row keeps its own caption.
  std::string base_caption = "a two-dimensional point pattern";
  FlowTrainConfig base{20, 256, 2e-3};
  LoraTrainConfig lora{4, 60, 128, 1e-2};
};

struct RunConfig {
  std::optional<std::uint64_t> seed;
  EncoderConfig encoder;
  RetrieverConfig retriever;  // retriever.text is shared with the toy conditions
  FusionTrainConfig fusion;
  EvalConfig eval;
  std::size_t eval_sets = 10;  // random sets per size in eval-fusion
  ToySection toy;
};

// Unknown keys anywhere throw ConfigError.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json run_config_json(const RunConfig& c);

// Seed from the config, or ConfigError when absent.
std::uint64_t require_seed(const RunConfig& c);

// Everything a pool directory holds:
//   manifest.json, base.ltoy, base_metrics.jsonl, adapters/<id>.lpak,
//   captions_train.jsonl, captions_heldout.jsonl,
//   datasets/<id>.jsonl, datasets_heldout/<id>.jsonl
struct Pool {
  ToyModel base;
  std::vector<LoRAAdapter> adapters;  // manifest order
  std::vector<CaptionPair> train_captions;
  std::vector<CaptionPair> heldout_captions;
  DatasetMap train;
  DatasetMap heldout;
  std::map<std::string, std::string> groups;  // adapter id -> theme

  std::vector<std::string> ids() const;
};

void cmd_synth_pool(const RunConfig& config, const std::filesystem::path& out);
Pool load_pool(const std::filesystem::path& dir);

// Writes encoder.lenc and retriever_metrics.jsonl.
RetrieverResult cmd_train_retriever(const RunConfig& config, const std::filesystem::path& pool_dir,
                                    const std::filesystem::path& out);
// Writes index.lidx.
RetrievalIndex cmd_build_index(const std::filesystem::path& pool_dir, const std::filesystem::path& encoder,
                               const std::filesystem::path& out);
// [{"adapter_id", "score"}, ...]
nlohmann::json cmd_query(const RunConfig& config, const std::filesystem::path& index, const std::string& caption,
                         std::size_t k);
// Writes heatmap.csv and heatmap_stats.json; groups come from a JSON object
// {adapter_id: group}.
Heatmap cmd_heatmap(const std::filesystem::path& index, const std::map<std::string, std::string>& groups,
                    const std::filesystem::path& out);
std::map<std::string, std::string> read_groups(const std::filesystem::path& path);
// Writes gates.lgat and fusion_metrics.jsonl.
FusionTrainResult cmd_train_fusion(const RunConfig& config, const std::filesystem::path& pool_dir,
                                   const std::filesystem::path& out);
// Writes fusion_report.json. Set sizes are {topk} when given, else {2, 3}.
nlohmann::json cmd_eval_fusion(const RunConfig& config, const std::filesystem::path& pool_dir,
                               const std::filesystem::path& gates, std::optional<std::size_t> topk,
                               const std::filesystem::path& out);

struct GenerateRequest {
  std::string caption;
  std::vector<std::string> adapters;     // empty: base model
  std::optional<std::filesystem::path> gates;  // gated fusion when set, else direct addition
  std::size_t samples = 400;
  std::size_t steps = 50;
};
// Writes samples.csv.
Tensor cmd_generate(const RunConfig& config, const std::filesystem::path& pool_dir, const GenerateRequest& req,
                    const std::filesystem::path& out);

}  // namespace autolora
