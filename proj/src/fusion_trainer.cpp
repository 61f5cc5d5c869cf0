#include "autolora/fusion_trainer.h"

#include <algorithm>
#include <cmath>
#include <optional>

#include "autolora/adam.h"
#include "autolora/svd.h"

namespace autolora {

namespace {

const LoRAAdapter& find_adapter(const std::vector<LoRAAdapter>& pool, const std::string& id) {
  for (const auto& a : pool) {
    if (a.adapter_id == id) return a;
  }
  throw ArgumentError("no adapter '" + id + "' in pool");
}

const FlowDataset& find_dataset(const DatasetMap& data, const std::string& id) {
  auto it = data.find(id);
  if (it == data.end() || it->second.size() == 0) throw ArgumentError("no dataset for adapter '" + id + "'");
  return it->second;
}

// Gates for every layer any pool adapter touches, all at init.
GateBundle fresh_gates(const ToyModel& base, const std::vector<LoRAAdapter>& pool) {
  GateBundle g;
  for (const auto& a : pool) {
    for (const auto& ld : a.layers) {
      if (!g.count(ld.layer_id)) g.emplace(ld.layer_id, init_gate(base.layer(ld.layer_id).weight.rows()));
    }
  }
  return g;
}

// Distinct indices; the first is uniform, the rest uniform among the
// remainder.
std::vector<std::size_t> sample_distinct(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> rest(n);
  for (std::size_t i = 0; i < n; ++i) rest[i] = i;
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < count; ++c) {
    const std::size_t pick = rng.below(rest.size());
    out.push_back(rest[pick]);
    rest.erase(rest.begin() + long(pick));
  }
  return out;
}

std::vector<std::size_t> prefix(std::size_t n, std::size_t count) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < std::min(n, count); ++i) idx.push_back(i);
  return idx;
}

}  // namespace

std::pair<std::size_t, std::size_t> sample_pair(std::size_t n, Rng& rng) {
  if (n < 2) throw ArgumentError("sample_pair: need at least two adapters");
  const std::size_t i = rng.below(n);
  std::size_t j = rng.below(n - 1);
  if (j >= i) ++j;
  return {i, j};
}

std::pair<LoRAAdapter, LoRAAdapter> sample_pair(const std::vector<LoRAAdapter>& pool, Rng& rng) {
  auto [i, j] = sample_pair(pool.size(), rng);
  return {pool[i], pool[j]};
}

ModelHandle fused_handle(const ToyModel& base, const std::vector<LoRAAdapter>& set, const GateBundle& gates,
                         const FusionTrainConfig& config) {
  std::optional<LoRAAdapter> global;
  if (config.use_global && !set.empty()) global = build_global_lora(set, config.r_g);
  return attach_fusion(base, set, gates, std::move(global), config.gate_mode);
}

FusionTrainResult train_fusion(const ToyModel& base, const std::vector<LoRAAdapter>& pool, const DatasetMap& datasets,
                               const FusionTrainConfig& config, std::uint64_t seed) {
  if (pool.size() < config.interference + 1 || config.interference == 0) {
    throw ArgumentError("train_fusion: pool too small for one target plus interference adapters");
  }
  if (config.steps == 0 || config.batch_size == 0 || !(config.lr > 0) || config.r_g == 0 || config.log_every == 0) {
    throw ArgumentError("train_fusion: steps, batch_size, lr, r_g and log_every must be positive");
  }
  for (const auto& a : pool) find_dataset(datasets, a.adapter_id);

  FusionTrainResult result{fresh_gates(base, pool), {}};
  Rng rng(Rng::derive(seed, 1));
  AdamState adam(config.lr);

  // Global LoRAs are pure functions of the (sorted) member set.
  std::map<std::vector<std::size_t>, LoRAAdapter> global_cache;
  auto handle_for = [&](const std::vector<std::size_t>& members) {
    std::vector<LoRAAdapter> set;
    for (std::size_t m : members) set.push_back(pool[m]);
    std::optional<LoRAAdapter> global;
    if (config.use_global) {
      auto key = members;
      std::sort(key.begin(), key.end());
      auto it = global_cache.find(key);
      if (it == global_cache.end()) it = global_cache.emplace(key, build_global_lora(set, config.r_g)).first;
      global = it->second;
    }
    return attach_fusion(base, std::move(set), result.gates, std::move(global), config.gate_mode);
  };

  // Fixed evaluation pairs and noise.
  Rng eval_rng(Rng::derive(seed, 2));
  std::vector<std::vector<std::size_t>> eval_sets;
  std::vector<FlowBatch> eval_batches;
  for (std::size_t e = 0; e < config.eval_pairs; ++e) {
    eval_sets.push_back(sample_distinct(pool.size(), config.interference + 1, eval_rng));
    const FlowDataset& d = find_dataset(datasets, pool[eval_sets.back()[0]].adapter_id);
    eval_batches.push_back(draw_batch(d, prefix(d.size(), config.eval_batch), eval_rng));
  }
  auto eval_loss = [&] {
    if (eval_sets.empty()) return std::nan("");
    double s = 0.0;
    for (std::size_t e = 0; e < eval_sets.size(); ++e) s += flow_matching_loss(handle_for(eval_sets[e]), eval_batches[e]).loss;
    return s / double(eval_sets.size());
  };

  result.log.push_back({0, std::nan(""), eval_loss()});
  double interval = 0.0;
  std::size_t interval_n = 0;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    std::vector<std::size_t> members;
    if (config.interference == 1) {
      auto [i, j] = sample_pair(pool.size(), rng);
      members = {i, j};
    } else {
      members = sample_distinct(pool.size(), config.interference + 1, rng);
    }
    const FlowDataset& data = find_dataset(datasets, pool[members[0]].adapter_id);
    std::vector<std::size_t> idx(config.batch_size);
    for (auto& r : idx) r = rng.below(data.size());
    const FlowBatch batch = draw_batch(data, idx, rng);

    ModelHandle h = handle_for(members);
    FlowLoss fl = flow_matching_loss(h, batch, {.gates = true});
    std::vector<Tensor*> params;
    std::vector<Tensor> grads;
    for (auto& [name, gp] : result.gates) {
      auto it = fl.grads.gates.find(name);
      auto ps = gp.parameter_list();
      for (std::size_t q = 0; q < ps.size(); ++q) {
        params.push_back(ps[q]);
        Tensor g = it == fl.grads.gates.end() ? Tensor(ps[q]->shape()) : *it->second.parameter_list()[q];
        if (config.freeze_w_o && q == 4) g.fill(0.0);
        grads.push_back(std::move(g));
      }
    }
    adam_step(params, grads, adam);
    interval += fl.loss;
    ++interval_n;
    if (step % config.log_every == 0 || step == config.steps) {
      result.log.push_back({step, interval / double(interval_n), eval_loss()});
      interval = 0.0;
      interval_n = 0;
    }
  }
  return result;
}

std::string fusion_log_jsonl(const std::vector<FusionLogRecord>& log) {
  std::string out;
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  for (const auto& r : log) {
    out += nlohmann::json{{"step", r.step}, {"loss", num(r.loss)}, {"eval_loss", num(r.eval_loss)}}.dump() + "\n";
  }
  return out;
}

std::vector<EvalSet> sample_eval_sets(const std::vector<std::string>& ids, std::size_t size, std::size_t count,
                                      std::uint64_t seed) {
  if (size > ids.size()) throw ArgumentError("sample_eval_sets: set larger than pool");
  if (size == 0) throw ArgumentError("sample_eval_sets: empty sets need an explicit target");
  Rng rng(seed);
  std::vector<EvalSet> out;
  for (std::size_t c = 0; c < count; ++c) {
    EvalSet s;
    for (std::size_t i : sample_distinct(ids.size(), size, rng)) s.adapters.push_back(ids[i]);
    s.target = s.adapters[0];
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<EvalRecord> eval_fusion(const ToyModel& base, const GateBundle& gates, const std::vector<LoRAAdapter>& pool,
                                    const std::vector<EvalSet>& sets, const DatasetMap& heldout,
                                    const FusionTrainConfig& fusion, const EvalConfig& config) {
  std::vector<EvalRecord> out;
  for (std::size_t si = 0; si < sets.size(); ++si) {
    const EvalSet& s = sets[si];
    const FlowDataset& data = find_dataset(heldout, s.target);
    std::vector<LoRAAdapter> members;
    for (const auto& id : s.adapters) members.push_back(find_adapter(pool, id));
    const auto c0 = data.conditions.row(0);
    const Tensor cond({1, c0.size()}, std::vector<double>(c0.begin(), c0.end()));
    const std::uint64_t noise = Rng::derive(config.seed, si);
    auto measure = [&](const ModelHandle& h) {
      return ArmMetrics{evaluate_flow_loss(h, data, noise),
                        energy_distance(generate(h, cond, config.samples, config.steps, noise), data.points)};
    };
    EvalRecord r{s, {}, {}, {}};
    r.base = measure(base_handle(base));
    r.direct = members.empty() ? r.base : measure(attach_direct(base, members, 1.0));
    r.gated = members.empty() ? r.base : measure(fused_handle(base, members, gates, fusion));
    out.push_back(std::move(r));
  }
  return out;
}

nlohmann::json eval_report_json(const std::vector<EvalRecord>& records) {
  auto arm = [](const ArmMetrics& m) { return nlohmann::json{{"flow_loss", m.flow_loss}, {"energy", m.energy}}; };
  nlohmann::json sets = nlohmann::json::array();
  std::size_t loss_wins = 0, energy_wins = 0;
  for (const auto& r : records) {
    sets.push_back({{"target", r.set.target},
                    {"adapters", r.set.adapters},
                    {"gated", arm(r.gated)},
                    {"direct", arm(r.direct)},
                    {"base", arm(r.base)}});
    loss_wins += r.gated.flow_loss <= r.direct.flow_loss;
    energy_wins += r.gated.energy <= r.direct.energy;
  }
  return {{"sets", sets},
          {"gated_loss_wins", loss_wins},
          {"gated_energy_wins", energy_wins},
          {"count", records.size()}};
}

}  // namespace autolora
