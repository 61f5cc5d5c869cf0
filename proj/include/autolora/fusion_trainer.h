#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "autolora/toy_flow.h"

namespace autolora {

// Uniform ordered pair of distinct indices in [0, n): (target, interference).
std::pair<std::size_t, std::size_t> sample_pair(std::size_t n, Rng& rng);
std::pair<LoRAAdapter, LoRAAdapter> sample_pair(const std::vector<LoRAAdapter>& pool, Rng& rng);

struct FusionTrainConfig {
  std::size_t steps = 1500;  // one sampled (target, interference) pair per step
  std::size_t batch_size = 256;
  double lr = 2e-2;
  std::size_t r_g = 4;
  std::size_t interference = 1;  // adapters besides the target per step
  bool use_global = true;
  GateMode gate_mode = GateMode::PerToken;
  bool freeze_w_o = false;  // diagnostic: only the gates themselves move
  std::size_t log_every = 100;
  std::size_t eval_pairs = 6;
  std::size_t eval_batch = 256;
};

struct FusionLogRecord {
  std::size_t step = 0;
  double loss = 0.0;       // mean training loss since the previous record
  double eval_loss = 0.0;  // fixed pairs, fixed noise
};

struct FusionTrainResult {
  GateBundle gates;
  std::vector<FusionLogRecord> log;
};

using DatasetMap = std::map<std::string, FlowDataset>;

// Adam on the gate parameters only; base and adapters stay frozen. Each
// step builds the global LoRA of the sampled adapters (when enabled),
// attaches everything and regresses on a batch of the target's data.
FusionTrainResult train_fusion(const ToyModel& base, const std::vector<LoRAAdapter>& pool, const DatasetMap& datasets,
                               const FusionTrainConfig& config, std::uint64_t seed);

std::string fusion_log_jsonl(const std::vector<FusionLogRecord>& log);

// The fused handle train_fusion and eval_fusion use for a set whose first
// adapter is the target.
ModelHandle fused_handle(const ToyModel& base, const std::vector<LoRAAdapter>& set, const GateBundle& gates,
                         const FusionTrainConfig& config);

struct EvalSet {
  std::string target;                 // dataset id
  std::vector<std::string> adapters;  // may be empty
};

// `count` distinct-member sets of `size` adapters drawn from ids; the first
// member of each set is its target.
std::vector<EvalSet> sample_eval_sets(const std::vector<std::string>& ids, std::size_t size, std::size_t count,
                                      std::uint64_t seed);

struct ArmMetrics {
  double flow_loss = 0.0;
  double energy = 0.0;
};

struct EvalRecord {
  EvalSet set;
  ArmMetrics gated, direct, base;
};

struct EvalConfig {
  std::size_t samples = 400;
  std::size_t steps = 50;  // Euler steps
  std::uint64_t seed = 0;
};

// Compares gated fusion, direct addition (scale 1, no global branch) and
// the bare base on each set's held-out target data. The generation
// condition is the first caption of the target's held-out data.
std::vector<EvalRecord> eval_fusion(const ToyModel& base, const GateBundle& gates, const std::vector<LoRAAdapter>& pool,
                                    const std::vector<EvalSet>& sets, const DatasetMap& heldout,
                                    const FusionTrainConfig& fusion, const EvalConfig& config);

nlohmann::json eval_report_json(const std::vector<EvalRecord>& records);

}  // namespace autolora
