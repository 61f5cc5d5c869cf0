#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "autolora/container.h"
#include "autolora/pipeline.h"

namespace autolora {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const json kSmall = json::parse(R"({
  "seed": 3,
  "toy": {"themes": ["spiral", "grid"], "samples": 120, "heldout_samples": 60, "width": 12,
          "base": {"epochs": 2, "batch_size": 64}, "lora": {"epochs": 2, "rank": 2, "batch_size": 64}},
  "retriever": {"epochs": 3},
  "encoder": {"blocks": 1, "mlp_hidden": 32},
  "fusion": {"steps": 12, "log_every": 4, "batch_size": 32, "eval_pairs": 2, "eval_batch": 32,
             "eval_sets": 2, "eval_samples": 30, "eval_steps": 4}
})");

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("autolora_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(const std::string& args) {
    const std::string cmd = std::string(AUTOLORA_CLI) + " " + args + " > " + (dir_ / "stdout.txt").string() + " 2> " +
                            (dir_ / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string stdout_text() { return read_file_bytes(dir_ / "stdout.txt"); }
  fs::path write_config(const json& j, const std::string& name = "config.json") {
    write_file_bytes(dir_ / name, j.dump());
    return dir_ / name;
  }

  fs::path dir_;
};

TEST(RunConfig, DefaultsAndOverrides) {
  const RunConfig d = parse_run_config(json::object());
  EXPECT_FALSE(d.seed.has_value());
  EXPECT_EQ(d.encoder.out_dim, 64u);
  EXPECT_EQ(d.retriever.epochs, 200u);
  EXPECT_EQ(d.fusion.r_g, 4u);
  EXPECT_EQ(d.toy.model.hidden_layers, 4u);
  EXPECT_EQ(d.toy.themes.size(), 6u);
  EXPECT_EQ(d.toy.base_caption, "a two-dimensional point pattern");
  EXPECT_EQ(parse_run_config(json{{"toy", {{"base_caption", ""}}}}).toy.base_caption, "");
  EXPECT_THROW(require_seed(d), ConfigError);

  const RunConfig c = parse_run_config(kSmall);
  EXPECT_EQ(*c.seed, 3u);
  EXPECT_EQ(c.toy.themes, (std::vector<std::string>{"spiral", "grid"}));
  EXPECT_EQ(c.toy.lora.rank, 2u);
  EXPECT_EQ(parse_run_config(run_config_json(c)).fusion.steps, 12u);
  EXPECT_EQ(run_config_json(parse_run_config(run_config_json(c))), run_config_json(c));
}

TEST(RunConfig, RejectsBadInput) {
  EXPECT_THROW(parse_run_config(json{{"sed", 1}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"fusion", {{"stepz", 3}}}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"toy", {{"base", {{"epochs", 2}, {"x", 1}}}}}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"fusion", {{"steps", -1}}}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"fusion", {{"lr", "fast"}}}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"fusion", {{"gate_mode", "sideways"}}}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"encoder", {{"heads", 5}}}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"toy", {{"base_caption", 3}}}}), ConfigError);
  EXPECT_THROW(parse_run_config(json::array()), ConfigError);
}

TEST_F(CliTest, SynthPoolDeterministicAndValidated) {
  RunConfig c = parse_run_config(kSmall);
  cmd_synth_pool(c, dir_ / "a");
  cmd_synth_pool(c, dir_ / "b");
  EXPECT_EQ(read_file_bytes(dir_ / "a" / "manifest.json"), read_file_bytes(dir_ / "b" / "manifest.json"));
  std::size_t packs = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "a" / "adapters")) {
    ++packs;
    EXPECT_EQ(read_file_bytes(e.path()), read_file_bytes(dir_ / "b" / "adapters" / e.path().filename()));
  }
  EXPECT_EQ(packs, 6u);
  EXPECT_EQ(read_file_bytes(dir_ / "a" / "base.ltoy"), read_file_bytes(dir_ / "b" / "base.ltoy"));

  const Pool p = load_pool(dir_ / "a");
  EXPECT_EQ(p.adapters.size(), 6u);
  EXPECT_EQ(p.groups.at("spiral-tight"), "spiral");
  EXPECT_EQ(p.train.at("grid-fine").size(), 120u);
  EXPECT_EQ(p.heldout_captions.size(), 12u);

  c.toy.themes = {"spiral"};
  EXPECT_THROW(cmd_synth_pool(c, dir_ / "c"), ConfigError);
  c.seed.reset();
  c.toy.themes = {"spiral", "grid"};
  EXPECT_THROW(cmd_synth_pool(c, dir_ / "c"), ConfigError);
}

TEST_F(CliTest, QuerySingleItemAndOrthogonalHeatmap) {
  RetrievalIndex idx{3, {"only"}, Tensor::matrix(1, 3, {0, 1, 0}), "fp"};
  save_index(idx, dir_ / "one.lidx");
  RunConfig c = parse_run_config(json{{"encoder", {{"out_dim", 3}, {"heads", 1}}}, {"retriever", {{"text", {{"out_dim", 3}}}}}});
  const json q = cmd_query(c, dir_ / "one.lidx", "anything at all", 1);
  ASSERT_EQ(q.size(), 1u);
  EXPECT_EQ(q[0]["adapter_id"], "only");
  EXPECT_LE(std::abs(q[0]["score"].get<double>()), 1.0);
  EXPECT_THROW(cmd_query(c, dir_ / "one.lidx", "x", 2), ArgumentError);

  RetrievalIndex orth{3, {"a", "b", "c"}, Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}), "fp"};
  save_index(orth, dir_ / "orth.lidx");
  const Heatmap h = cmd_heatmap(dir_ / "orth.lidx", {{"a", "g1"}, {"b", "g2"}, {"c", "g3"}}, dir_);
  EXPECT_EQ(h.inter_mean, 0.0);
  const json stats = json::parse(read_file_bytes(dir_ / "heatmap_stats.json"));
  EXPECT_EQ(stats["inter_mean"].get<double>(), 0.0);
  EXPECT_TRUE(stats["intra_mean"].is_null());
  const std::string csv = read_file_bytes(dir_ / "heatmap.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "adapter_id,a,b,c");
}

// Whole pipeline through the binary, checking exit codes and that re-runs
// produce identical bytes.
TEST_F(CliTest, EndToEndThroughBinary) {
  const fs::path cfg = write_config(kSmall);
  const std::string c = "--config " + cfg.string();
  const fs::path d = dir_;
  ASSERT_EQ(run("synth-pool " + c + " --out " + (d / "pool").string()), 0) << read_file_bytes(d / "stderr.txt");
  for (const char* out : {"r1", "r2"}) {
    ASSERT_EQ(run("train-retriever " + c + " --pool " + (d / "pool").string() + " --out " + (d / out).string()), 0);
  }
  EXPECT_EQ(read_file_bytes(d / "r1" / "encoder.lenc"), read_file_bytes(d / "r2" / "encoder.lenc"));
  EXPECT_EQ(read_file_bytes(d / "r1" / "retriever_metrics.jsonl"), read_file_bytes(d / "r2" / "retriever_metrics.jsonl"));
  ASSERT_EQ(run("build-index --pool " + (d / "pool").string() + " --encoder " + (d / "r1" / "encoder.lenc").string() +
                " --out " + (d / "r1").string()),
            0);
  ASSERT_EQ(run("query --index " + (d / "r1" / "index.lidx").string() + " --caption 'a tight spiral' --k 2"), 0);
  const json q = json::parse(stdout_text());
  ASSERT_EQ(q.size(), 2u);
  EXPECT_GE(q[0]["score"].get<double>(), q[1]["score"].get<double>());
  ASSERT_EQ(run("heatmap --index " + (d / "r1" / "index.lidx").string() + " --pool " + (d / "pool").string() +
                " --out " + (d / "r1").string()),
            0);
  EXPECT_TRUE(fs::exists(d / "r1" / "heatmap.csv"));

  for (const char* out : {"f1", "f2"}) {
    ASSERT_EQ(run("train-fusion " + c + " --pool " + (d / "pool").string() + " --out " + (d / out).string()), 0);
  }
  EXPECT_EQ(read_file_bytes(d / "f1" / "gates.lgat"), read_file_bytes(d / "f2" / "gates.lgat"));
  EXPECT_EQ(read_file_bytes(d / "f1" / "fusion_metrics.jsonl"), read_file_bytes(d / "f2" / "fusion_metrics.jsonl"));
  ASSERT_EQ(run("eval-fusion " + c + " --pool " + (d / "pool").string() + " --gates " + (d / "f1" / "gates.lgat").string() +
                " --topk 2 --out " + (d / "f1").string()),
            0);
  const json report = json::parse(read_file_bytes(d / "f1" / "fusion_report.json"));
  EXPECT_EQ(report["sizes"]["2"]["count"], 2);
  ASSERT_EQ(run("generate " + c + " --pool " + (d / "pool").string() +
                " --caption 'fine grid' --adapters grid-fine,spiral-loose --samples 7 --steps 3 --out " + (d / "g").string()),
            0);
  const std::string csv = read_file_bytes(d / "g" / "samples.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 8);

  // Usage and input errors.
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("synth-pool --out " + (d / "x").string()), 2);  // no seed
  EXPECT_EQ(run("synth-pool --config " + write_config(json{{"seed", 1}, {"toy", {{"themes", {"grid"}}}}}, "one.json").string() +
                " --out " + (d / "x").string()),
            2);
  EXPECT_EQ(run("synth-pool --config " + write_config(json{{"seed", 1}, {"extra", 1}}, "bad.json").string()), 2);
  EXPECT_EQ(run("query --index " + (d / "missing.lidx").string() + " --caption a"), 2);
  EXPECT_EQ(run("generate --pool " + (d / "pool").string() + " --caption a --adapters nope"), 2);
}

// A run whose losses blow up reports a numeric failure.
TEST_F(CliTest, NumericFailureExitCode) {
  json j = kSmall;
  j["toy"]["base"]["lr"] = 1e300;
  EXPECT_EQ(run("synth-pool --config " + write_config(j).string() + " --out " + (dir_ / "p").string()), 3)
      << read_file_bytes(dir_ / "stderr.txt");
}

}  // namespace
}  // namespace autolora
