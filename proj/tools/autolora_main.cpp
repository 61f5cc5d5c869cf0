// Batch command surface for the AutoLoRA pipeline.
//
// Exit codes: 0 success, 2 usage or input error, 3 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "autolora/container.h"
#include "autolora/encoder.h"
#include "autolora/pipeline.h"

namespace fs = std::filesystem;
using namespace autolora;

namespace {

constexpr int kUsage = 2;
constexpr int kNumeric = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Random seed (overrides the config)");
  cmd->add_option("--out", c.out, "Output directory");
}

RunConfig resolve(const Common& c) {
  RunConfig rc = c.config.empty() ? parse_run_config(nlohmann::json::object()) : load_run_config(c.config);
  if (c.seed) rc.seed = *c.seed;
  return rc;
}

void print(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AutoLoRA: retrieve LoRA adapters by weight encoding and fuse them with learned gates"};
  app.require_subcommand(1);
  Common common;
  std::string pool, encoder, index, gates, groups, caption;
  std::size_t k = 5, samples = 400, steps = 50;
  std::optional<std::size_t> topk;
  std::vector<std::string> adapters;

  auto* synth = app.add_subcommand("synth-pool", "Train the toy base model and one adapter per theme variation");
  add_common(synth, common);

  auto* train_ret = app.add_subcommand("train-retriever", "Train the weight encoder contrastively against captions");
  add_common(train_ret, common);
  train_ret->add_option("--pool", pool, "Pool directory")->required();

  auto* build = app.add_subcommand("build-index", "Encode every pool adapter into a retrieval index");
  add_common(build, common);
  build->add_option("--pool", pool, "Pool directory")->required();
  build->add_option("--encoder", encoder, "encoder.lenc")->required();

  auto* query = app.add_subcommand("query", "Print the top-k adapters for a caption as JSON");
  add_common(query, common);
  query->add_option("--index", index, "index.lidx")->required();
  query->add_option("--caption", caption, "Query text")->required();
  query->add_option("--k", k, "Number of results");

  auto* heat = app.add_subcommand("heatmap", "Write the adapter similarity matrix and intra/inter-theme stats");
  add_common(heat, common);
  heat->add_option("--index", index, "index.lidx")->required();
  auto* heat_pool = heat->add_option("--pool", pool, "Pool directory (themes as groups)");
  heat->add_option("--groups", groups, "JSON object {adapter_id: group}")->excludes(heat_pool);

  auto* train_fus = app.add_subcommand("train-fusion", "Train the fusion gates with interference adapters");
  add_common(train_fus, common);
  train_fus->add_option("--pool", pool, "Pool directory")->required();

  auto* eval_fus = app.add_subcommand("eval-fusion", "Compare gated fusion, direct addition and the base model");
  add_common(eval_fus, common);
  eval_fus->add_option("--pool", pool, "Pool directory")->required();
  eval_fus->add_option("--gates", gates, "gates.lgat")->required();
  eval_fus->add_option("--topk", topk, "Adapters per fused set (default: 2 and 3)");

  auto* gen = app.add_subcommand("generate", "Sample points for a caption with optional fused adapters");
  add_common(gen, common);
  gen->add_option("--pool", pool, "Pool directory")->required();
  gen->add_option("--caption", caption, "Condition text")->required();
  gen->add_option("--adapters", adapters, "Adapter ids to attach")->delimiter(',');
  gen->add_option("--gates", gates, "gates.lgat; gated fusion instead of direct addition");
  gen->add_option("--samples", samples, "Number of points");
  gen->add_option("--steps", steps, "Euler steps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    const RunConfig rc = resolve(common);
    const fs::path out = common.out;
    if (synth->parsed()) {
      cmd_synth_pool(rc, out);
      print({{"pool", out.string()}, {"manifest", (out / "manifest.json").string()}});
    } else if (train_ret->parsed()) {
      const auto r = cmd_train_retriever(rc, pool, out);
      const auto& last = r.metrics.back();
      print({{"encoder", (out / "encoder.lenc").string()},
             {"metrics", (out / "retriever_metrics.jsonl").string()},
             {"heldout_recall_at_1", last.heldout_recall_at_1}});
    } else if (build->parsed()) {
      const auto idx = cmd_build_index(pool, encoder, out);
      print({{"index", (out / "index.lidx").string()}, {"count", idx.size()}});
    } else if (query->parsed()) {
      print(cmd_query(rc, index, caption, k));
    } else if (heat->parsed()) {
      std::map<std::string, std::string> g;
      if (!groups.empty()) {
        g = read_groups(groups);
      } else if (!pool.empty()) {
        g = load_pool(pool).groups;
      } else {
        throw ConfigError("heatmap needs --pool or --groups");
      }
      cmd_heatmap(index, g, out);
      print({{"csv", (out / "heatmap.csv").string()}, {"stats", (out / "heatmap_stats.json").string()}});
    } else if (train_fus->parsed()) {
      const auto r = cmd_train_fusion(rc, pool, out);
      print({{"gates", (out / "gates.lgat").string()},
             {"metrics", (out / "fusion_metrics.jsonl").string()},
             {"final_eval_loss", r.log.back().eval_loss}});
    } else if (eval_fus->parsed()) {
      cmd_eval_fusion(rc, pool, gates, topk, out);
      print({{"report", (out / "fusion_report.json").string()}});
    } else if (gen->parsed()) {
      GenerateRequest req{caption, adapters, std::nullopt, samples, steps};
      if (!gates.empty()) req.gates = fs::path(gates);
      cmd_generate(rc, pool, req, out);
      print({{"samples", (out / "samples.csv").string()}});
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    // Argument, config, format, missing-file and layer errors.
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return 0;
}
