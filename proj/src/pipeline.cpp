#include "autolora/pipeline.h"

#include <cmath>
#include <set>

#include "autolora/container.h"
#include "autolora/pack.h"

namespace autolora {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Reads one JSON object, remembering which keys were consumed so that
// leftovers can be reported.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  void get(const char* key, std::size_t& out, bool positive = true) {
    if (!take(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(where(key) + ": expected a non-negative integer");
    }
    out = v.get<std::size_t>();
    if (positive && out == 0) throw ConfigError(where(key) + ": must be positive");
  }
  void get(const char* key, double& out) {
    if (!take(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
    out = v.get<double>();
    if (!(out > 0) || !std::isfinite(out)) throw ConfigError(where(key) + ": must be positive");
  }
  void get(const char* key, bool& out) {
    if (!take(key)) return;
    if (!j_.at(key).is_boolean()) throw ConfigError(where(key) + ": expected true or false");
    out = j_.at(key).get<bool>();
  }
  void get(const char* key, std::string& out) {
    if (!take(key)) return;
    if (!j_.at(key).is_string()) throw ConfigError(where(key) + ": expected a string");
    out = j_.at(key).get<std::string>();
  }
  void get(const char* key, std::vector<std::string>& out) {
    if (!take(key)) return;
    out.clear();
    for (const auto& v : j_.at(key)) {
      if (!v.is_string()) throw ConfigError(where(key) + ": expected a list of strings");
      out.push_back(v.get<std::string>());
    }
  }
  std::optional<Section> child(const char* key) {
    if (!take(key)) return std::nullopt;
    return Section(j_.at(key), where(key));
  }
  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + where(k.c_str()) + "'");
    }
  }

 private:
  bool take(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  std::string where(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string gate_mode_name(GateMode m) { return m == GateMode::Pooled ? "pooled" : "per-token"; }

void write_json(const fs::path& path, const json& j) { write_file_bytes(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(read_file_bytes(path));
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::Manifest, path.string() + ": invalid JSON: " + e.what());
  }
}

json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::vector<ThemeSpec> selected_themes(const RunConfig& c) {
  std::set<std::string> wanted(c.toy.themes.begin(), c.toy.themes.end());
  const auto known = generator_names();
  for (const auto& w : wanted) {
    if (std::find(known.begin(), known.end(), w) == known.end()) throw ConfigError("unknown theme '" + w + "'");
  }
  if (wanted.size() < 2) throw ConfigError("toy.themes: a pool needs at least two themes");
  std::vector<ThemeSpec> out;
  for (const auto& t : standard_themes()) {
    if (wanted.count(t.generator)) out.push_back(t);
  }
  return out;
}

ToyModelConfig model_config(const RunConfig& c) {
  ToyModelConfig m = c.toy.model;
  m.text = c.retriever.text;
  return m;
}

std::uint64_t eval_seed(const RunConfig& c) { return c.seed.value_or(0); }

}  // namespace

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  c.toy.themes = generator_names();
  Section root(j, "");
  if (j.contains("seed")) {
    std::size_t s = 0;
    root.get("seed", s, false);
    c.seed = s;
  }
  if (auto s = root.child("encoder")) {
    s->get("out_dim", c.encoder.out_dim);
    s->get("blocks", c.encoder.blocks);
    s->get("heads", c.encoder.heads);
    s->get("mlp_hidden", c.encoder.mlp_hidden);
    s->finish();
  }
  if (auto s = root.child("retriever")) {
    s->get("epochs", c.retriever.epochs);
    s->get("batch_size", c.retriever.batch_size);
    s->get("lr", c.retriever.lr);
    s->get("learnable_temperature", c.retriever.learnable_temperature);
    if (auto t = s->child("text")) {
      t->get("out_dim", c.retriever.text.out_dim);
      t->get("buckets", c.retriever.text.buckets);
      std::size_t text_seed = c.retriever.text.seed;
      t->get("seed", text_seed, false);
      c.retriever.text.seed = text_seed;
      t->finish();
    }
    s->finish();
  }
  if (auto s = root.child("fusion")) {
    auto& f = c.fusion;
    s->get("steps", f.steps);
    s->get("batch_size", f.batch_size);
    s->get("lr", f.lr);
    s->get("r_g", f.r_g);
    s->get("interference", f.interference);
    s->get("use_global", f.use_global);
    std::string mode = gate_mode_name(f.gate_mode);
    s->get("gate_mode", mode);
    if (mode != "per-token" && mode != "pooled") throw ConfigError("fusion.gate_mode: per-token or pooled");
    f.gate_mode = mode == "pooled" ? GateMode::Pooled : GateMode::PerToken;
    s->get("log_every", f.log_every);
    s->get("eval_pairs", f.eval_pairs, false);
    s->get("eval_batch", f.eval_batch);
    s->get("eval_sets", c.eval_sets);
    s->get("eval_samples", c.eval.samples);
    s->get("eval_steps", c.eval.steps);
    s->finish();
  }
  if (auto s = root.child("toy")) {
    auto& t = c.toy;
    s->get("hidden_layers", t.model.hidden_layers);
    s->get("width", t.model.width);
    s->get("c_dim", t.model.c_dim);
    s->get("time_freqs", t.model.time_freqs, false);
    s->get("themes", t.themes);
    s->get("samples", t.samples);
    s->get("heldout_samples", t.heldout_samples);
    s->get("base_caption", t.base_caption);
    if (auto b = s->child("base")) {
      b->get("epochs", t.base.epochs);
      b->get("batch_size", t.base.batch_size);
      b->get("lr", t.base.lr);
      b->finish();
    }
    if (auto l = s->child("lora")) {
      l->get("rank", t.lora.rank);
      l->get("epochs", t.lora.epochs);
      l->get("batch_size", t.lora.batch_size);
      l->get("lr", t.lora.lr);
      l->finish();
    }
    s->finish();
  }
  root.finish();
  if (c.encoder.out_dim % c.encoder.heads != 0) throw ConfigError("encoder.out_dim must be divisible by encoder.heads");
  if (c.retriever.text.out_dim != c.encoder.out_dim) {
    throw ConfigError("retriever.text.out_dim must equal encoder.out_dim");
  }
  return c;
}

RunConfig load_run_config(const fs::path& path) { return parse_run_config(read_json(path)); }

json run_config_json(const RunConfig& c) {
  json j = {
      {"encoder",
       {{"out_dim", c.encoder.out_dim}, {"blocks", c.encoder.blocks}, {"heads", c.encoder.heads},
        {"mlp_hidden", c.encoder.mlp_hidden}}},
      {"retriever",
       {{"epochs", c.retriever.epochs},
        {"batch_size", c.retriever.batch_size},
        {"lr", c.retriever.lr},
        {"learnable_temperature", c.retriever.learnable_temperature},
        {"text",
         {{"out_dim", c.retriever.text.out_dim}, {"buckets", c.retriever.text.buckets},
          {"seed", c.retriever.text.seed}}}}},
      {"fusion",
       {{"steps", c.fusion.steps},
        {"batch_size", c.fusion.batch_size},
        {"lr", c.fusion.lr},
        {"r_g", c.fusion.r_g},
        {"interference", c.fusion.interference},
        {"use_global", c.fusion.use_global},
        {"gate_mode", gate_mode_name(c.fusion.gate_mode)},
        {"log_every", c.fusion.log_every},
        {"eval_pairs", c.fusion.eval_pairs},
        {"eval_batch", c.fusion.eval_batch},
        {"eval_sets", c.eval_sets},
        {"eval_samples", c.eval.samples},
        {"eval_steps", c.eval.steps}}},
      {"toy",
       {{"hidden_layers", c.toy.model.hidden_layers},
        {"width", c.toy.model.width},
        {"c_dim", c.toy.model.c_dim},
        {"time_freqs", c.toy.model.time_freqs},
        {"themes", c.toy.themes},
        {"samples", c.toy.samples},
        {"heldout_samples", c.toy.heldout_samples},
        {"base_caption", c.toy.base_caption},
        {"base", {{"epochs", c.toy.base.epochs}, {"batch_size", c.toy.base.batch_size}, {"lr", c.toy.base.lr}}},
        {"lora",
         {{"rank", c.toy.lora.rank},
          {"epochs", c.toy.lora.epochs},
          {"batch_size", c.toy.lora.batch_size},
          {"lr", c.toy.lora.lr}}}}},
  };
  if (c.seed) j["seed"] = *c.seed;
  return j;
}

std::uint64_t require_seed(const RunConfig& c) {
  if (!c.seed) throw ConfigError("a seed is required (--seed or \"seed\" in the config)");
  return *c.seed;
}

std::vector<std::string> Pool::ids() const {
  std::vector<std::string> out;
  for (const auto& a : adapters) out.push_back(a.adapter_id);
  return out;
}

void cmd_synth_pool(const RunConfig& config, const fs::path& out) {
  const std::uint64_t seed = require_seed(config);
  const auto themes = selected_themes(config);
  const ToyModelConfig mc = model_config(config);

  std::vector<FlowDataset> train;
  std::vector<CaptionPair> train_caps, heldout_caps;
  json entries = json::array();
  for (std::size_t i = 0; i < themes.size(); ++i) {
    const ThemeSpec& t = themes[i];
    const ThemeSamples tr = make_dataset(t, config.toy.samples, Rng::derive(seed, 100 + i));
    const ThemeSamples ho = make_dataset(t, config.toy.heldout_samples, Rng::derive(seed, 200 + i));
    write_dataset_jsonl(out / "datasets" / (t.theme_id + ".jsonl"), tr);
    write_dataset_jsonl(out / "datasets_heldout" / (t.theme_id + ".jsonl"), ho);
    train.push_back(to_flow_dataset(tr, mc));
    for (const auto& tmpl : t.caption_templates) train_caps.push_back({t.theme_id, fill_template(tmpl, t), {}});
    for (const auto& tmpl : t.heldout_templates) heldout_caps.push_back({t.theme_id, fill_template(tmpl, t), {}});
    entries.push_back({{"adapter_id", t.theme_id},
                       {"theme", t.theme},
                       {"variation", t.variation},
                       {"pack", "adapters/" + t.theme_id + ".lpak"},
                       {"dataset", "datasets/" + t.theme_id + ".jsonl"},
                       {"heldout_dataset", "datasets_heldout/" + t.theme_id + ".jsonl"}});
  }
  write_caption_pairs(out / "captions_train.jsonl", train_caps);
  write_caption_pairs(out / "captions_heldout.jsonl", heldout_caps);

  FlowDataset mixture = concat(train);
  if (!config.toy.base_caption.empty()) {
    const Tensor c = condition_embedding(config.toy.base_caption, mc);
    for (std::size_t r = 0; r < mixture.size(); ++r)
      for (std::size_t j = 0; j < mc.c_dim; ++j) mixture.conditions(r, j) = c[j];
  }
  TrainCurve curve;
  const ToyModel base =
      train_base(init_toy_model(mc, Rng::derive(seed, 10)), mixture, config.toy.base, Rng::derive(seed, 11), &curve);
  save_toy_model(base, out / "base.ltoy");
  std::string metrics;
  for (std::size_t e = 0; e < curve.epoch_loss.size(); ++e) {
    metrics += json{{"epoch", e}, {"loss", curve.epoch_loss[e]}}.dump() + "\n";
  }
  write_file_bytes(out / "base_metrics.jsonl", metrics);

  for (std::size_t i = 0; i < themes.size(); ++i) {
    const ThemeSpec& t = themes[i];
    LoRAAdapter a = train_lora(base, train[i], t.theme_id, config.toy.lora, Rng::derive(seed, 300 + i));
    a.metadata = {{"caption", fill_template(t.caption_templates[0], t)},
                  {"theme", t.theme},
                  {"variation", t.variation}};
    save_pack(a, out / "adapters" / (t.theme_id + ".lpak"));
  }
  write_json(out / "manifest.json",
             {{"seed", seed}, {"base", "base.ltoy"}, {"adapters", entries}, {"config", run_config_json(config)}});
}

Pool load_pool(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  Pool p;
  try {
    p.base = load_toy_model(dir / manifest.at("base").get<std::string>());
    for (const auto& e : manifest.at("adapters")) {
      const auto id = e.at("adapter_id").get<std::string>();
      p.adapters.push_back(load_pack(dir / e.at("pack").get<std::string>()));
      if (p.adapters.back().adapter_id != id) throw FormatError(FormatError::Kind::Manifest, "pack id mismatch for " + id);
      p.groups[id] = e.at("theme").get<std::string>();
      p.train[id] = to_flow_dataset(read_dataset_jsonl(dir / e.at("dataset").get<std::string>()), p.base.config);
      p.heldout[id] = to_flow_dataset(read_dataset_jsonl(dir / e.at("heldout_dataset").get<std::string>()), p.base.config);
    }
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::Manifest, (dir / "manifest.json").string() + ": " + e.what());
  }
  p.train_captions = read_caption_pairs(dir / "captions_train.jsonl");
  p.heldout_captions = read_caption_pairs(dir / "captions_heldout.jsonl");
  return p;
}

RetrieverResult cmd_train_retriever(const RunConfig& config, const fs::path& pool_dir, const fs::path& out) {
  const std::uint64_t seed = require_seed(config);
  const Pool pool = load_pool(pool_dir);
  RetrieverConfig rc = config.retriever;
  rc.encoder = config.encoder;
  RetrieverResult r = train_retriever(pool.adapters, pool.train_captions, pool.heldout_captions, rc, seed);
  save_encoder(r.params, out / "encoder.lenc");
  write_file_bytes(out / "retriever_metrics.jsonl", retriever_metrics_jsonl(r.metrics));
  return r;
}

RetrievalIndex cmd_build_index(const fs::path& pool_dir, const fs::path& encoder, const fs::path& out) {
  const Pool pool = load_pool(pool_dir);
  RetrievalIndex index = build_index(pool.adapters, load_encoder(encoder));
  save_index(index, out / "index.lidx");
  return index;
}

json cmd_query(const RunConfig& config, const fs::path& index_path, const std::string& caption, std::size_t k) {
  const RetrievalIndex index = load_index(index_path);
  json out = json::array();
  for (const auto& [id, score] : query_topk(index, embed_text(caption, config.retriever.text), k)) {
    out.push_back({{"adapter_id", id}, {"score", score}});
  }
  return out;
}

std::map<std::string, std::string> read_groups(const fs::path& path) {
  const json j = read_json(path);
  if (!j.is_object()) throw FormatError(FormatError::Kind::Manifest, path.string() + ": expected {id: group}");
  std::map<std::string, std::string> g;
  for (const auto& [id, group] : j.items()) {
    if (!group.is_string()) throw FormatError(FormatError::Kind::Manifest, path.string() + ": groups must be strings");
    g[id] = group.get<std::string>();
  }
  return g;
}

Heatmap cmd_heatmap(const fs::path& index_path, const std::map<std::string, std::string>& groups, const fs::path& out) {
  const RetrievalIndex index = load_index(index_path);
  Heatmap h = similarity_heatmap(index, groups);
  std::string csv = "adapter_id";
  for (const auto& id : index.ids) csv += "," + id;
  csv += "\n";
  char buf[32];
  for (std::size_t i = 0; i < index.size(); ++i) {
    csv += index.ids[i];
    for (std::size_t j = 0; j < index.size(); ++j) {
      std::snprintf(buf, sizeof buf, ",%.9g", h.similarity(i, j));
      csv += buf;
    }
    csv += "\n";
  }
  write_file_bytes(out / "heatmap.csv", csv);
  write_json(out / "heatmap_stats.json", {{"intra_mean", num_or_null(h.intra_mean)},
                                          {"inter_mean", num_or_null(h.inter_mean)},
                                          {"gap", num_or_null(h.intra_mean - h.inter_mean)},
                                          {"count", index.size()}});
  return h;
}

FusionTrainResult cmd_train_fusion(const RunConfig& config, const fs::path& pool_dir, const fs::path& out) {
  const std::uint64_t seed = require_seed(config);
  const Pool pool = load_pool(pool_dir);
  FusionTrainResult r = train_fusion(pool.base, pool.adapters, pool.train, config.fusion, seed);
  save_gates(r.gates, out / "gates.lgat");
  write_file_bytes(out / "fusion_metrics.jsonl", fusion_log_jsonl(r.log));
  return r;
}

json cmd_eval_fusion(const RunConfig& config, const fs::path& pool_dir, const fs::path& gates_path,
                     std::optional<std::size_t> topk, const fs::path& out) {
  const Pool pool = load_pool(pool_dir);
  const GateBundle gates = load_gates(gates_path);
  std::vector<std::size_t> sizes = topk ? std::vector<std::size_t>{*topk} : std::vector<std::size_t>{2, 3};
  EvalConfig ec = config.eval;
  ec.seed = eval_seed(config);
  json report = {{"sizes", json::object()}};
  for (std::size_t size : sizes) {
    if (size == 0 || size > pool.adapters.size()) throw ConfigError("--topk must be in [1, pool size]");
    const auto sets = sample_eval_sets(pool.ids(), size, config.eval_sets, Rng::derive(ec.seed, 500 + size));
    report["sizes"][std::to_string(size)] =
        eval_report_json(eval_fusion(pool.base, gates, pool.adapters, sets, pool.heldout, config.fusion, ec));
  }
  write_json(out / "fusion_report.json", report);
  return report;
}

Tensor cmd_generate(const RunConfig& config, const fs::path& pool_dir, const GenerateRequest& req, const fs::path& out) {
  const Pool pool = load_pool(pool_dir);
  std::vector<LoRAAdapter> chosen;
  for (const auto& id : req.adapters) {
    auto it = std::find_if(pool.adapters.begin(), pool.adapters.end(), [&](const auto& a) { return a.adapter_id == id; });
    if (it == pool.adapters.end()) throw ConfigError("unknown adapter '" + id + "'");
    chosen.push_back(*it);
  }
  ModelHandle h = base_handle(pool.base);
  if (!chosen.empty()) {
    h = req.gates ? fused_handle(pool.base, chosen, load_gates(*req.gates), config.fusion)
                  : attach_direct(pool.base, chosen, 1.0);
  }
  const Tensor c = condition_embedding(req.caption, pool.base.config);
  Tensor samples = generate(h, c, req.samples, req.steps, eval_seed(config));
  write_samples_csv(out / "samples.csv", samples);
  return samples;
}

}  // namespace autolora
