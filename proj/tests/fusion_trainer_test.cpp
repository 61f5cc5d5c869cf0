#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "autolora/fusion_trainer.h"
#include "autolora/grad_check.h"
#include "test_util.h"

namespace autolora {
namespace {

ToyModelConfig small_config() {
  ToyModelConfig c;
  c.hidden_layers = 2;
  c.width = 8;
  c.c_dim = 3;
  c.time_freqs = 1;
  return c;
}

std::vector<testing::LayerShape> hosted_shapes(const ToyModel& m) {
  std::vector<testing::LayerShape> s;
  for (const auto& e : m.lora_catalog()) s.push_back({e.layer_id, e.d, e.k});
  return s;
}

FlowBatch random_batch(Rng& rng, std::size_t n, std::size_t c_dim) {
  FlowBatch b{rng.gaussian_tensor({n, 2}, 1.0), rng.gaussian_tensor({n, 2}, 1.0), {}, rng.gaussian_tensor({n, c_dim}, 1.0)};
  for (std::size_t i = 0; i < n; ++i) b.t.push_back(rng.uniform());
  return b;
}

TEST(Interpolate, EndpointsAndMidpoint) {
  Rng rng(1);
  const Tensor x0 = rng.gaussian_tensor({3, 2}, 1.0), x1 = rng.gaussian_tensor({3, 2}, 1.0);
  EXPECT_EQ(interpolate(x0, x1, 0.0), x0);
  EXPECT_EQ(interpolate(x0, x1, 1.0), x1);
  EXPECT_EQ(interpolate(Tensor::matrix(1, 1, 0.0), Tensor::matrix(1, 1, 2.0), 0.5)[0], 1.0);
  EXPECT_THROW(interpolate(x0, x1, 1.5), ArgumentError);
  EXPECT_THROW(interpolate(x0, x1, -0.1), ArgumentError);
  EXPECT_THROW(interpolate(x0, Tensor::matrix(2, 2), 0.5), ArgumentError);
}

TEST(FlowLoss, ExactAndZeroPredictors) {
  const ToyModelConfig cfg = small_config();
  ToyModel m = init_toy_model(cfg, 2);
  Rng rng(3);
  FlowBatch b = random_batch(rng, 6, cfg.c_dim);
  // Constant displacement, predicted exactly by a zero head with that bias.
  for (std::size_t i = 0; i < 6; ++i) {
    b.x1(i, 0) = b.x0(i, 0) + 0.75;
    b.x1(i, 1) = b.x0(i, 1) - 1.25;
  }
  m.layers.back().weight.fill(0.0);
  m.layers.back().bias = Tensor::matrix(1, 2, {0.75, -1.25}).reshaped({2});
  EXPECT_NEAR(flow_matching_loss(base_handle(m), b).loss, 0.0, 1e-28);

  m.layers.back().bias.fill(0.0);
  b = random_batch(rng, 6, cfg.c_dim);
  double mean_v = 0.0;
  for (std::size_t i = 0; i < 6; ++i)
    mean_v += std::pow(b.x1(i, 0) - b.x0(i, 0), 2) + std::pow(b.x1(i, 1) - b.x0(i, 1), 2);
  EXPECT_NEAR(flow_matching_loss(base_handle(m), b).loss, mean_v / 6.0, 1e-12);
}

// Per-sample evaluation with the interpolant and features built by hand.
TEST(FlowLoss, MatchesElementwiseOracle) {
  const ToyModelConfig cfg = small_config();
  const ToyModel m = init_toy_model(cfg, 4);
  Rng rng(4);
  auto adapters = std::vector{testing::random_adapter(rng, "a", hosted_shapes(m), 2, 0.3),
                              testing::random_adapter(rng, "b", hosted_shapes(m), 2, 0.3)};
  GateBundle gates;
  for (const auto& e : m.lora_catalog()) {
    GateParams p = init_gate(e.d);
    for (Tensor* t : p.parameter_list()) *t = rng.gaussian_tensor({e.d}, 0.5);
    gates.emplace(e.layer_id, p);
  }
  const ModelHandle h = attach_fusion(m, adapters, gates);
  const FlowBatch b = random_batch(rng, 7, cfg.c_dim);
  double oracle = 0.0;
  for (std::size_t i = 0; i < 7; ++i) {
    const double t = b.t[i];
    Tensor f = Tensor::matrix(1, cfg.input_dim());
    f(0, 0) = (1 - t) * b.x0(i, 0) + t * b.x1(i, 0);
    f(0, 1) = (1 - t) * b.x0(i, 1) + t * b.x1(i, 1);
    f(0, 2) = t;
    f(0, 3) = std::sin(2 * M_PI * t);
    f(0, 4) = std::cos(2 * M_PI * t);
    for (std::size_t j = 0; j < cfg.c_dim; ++j) f(0, 5 + j) = b.c(i, j);
    const Tensor v = velocity(h, f);
    for (std::size_t j = 0; j < 2; ++j) oracle += std::pow(v[j] - (b.x1(i, j) - b.x0(i, j)), 2);
  }
  EXPECT_NEAR(flow_matching_loss(h, b).loss, oracle / 7.0, 1e-9);
}

// Gate gradients of the flow loss for a fused model.
GradReport check_flow_loss(std::uint64_t seed, std::size_t width, std::size_t n, std::size_t k) {
  ToyModelConfig cfg = small_config();
  cfg.width = width;
  const ToyModel m = init_toy_model(cfg, seed);
  Rng rng(seed);
  std::vector<LoRAAdapter> adapters;
  for (std::size_t i = 0; i < k; ++i) adapters.push_back(testing::random_adapter(rng, std::to_string(i), hosted_shapes(m), 2, 0.5));
  const FlowBatch b = random_batch(rng, n, cfg.c_dim);
  std::vector<Tensor> inputs;
  std::vector<std::string> names;
  for (const auto& e : m.lora_catalog()) {
    names.push_back(e.layer_id);
    for (int q = 0; q < 5; ++q) inputs.push_back(rng.gaussian_tensor({e.d}, 0.5));
  }
  auto op = [=](const std::vector<Tensor>& in, std::vector<Tensor>* grads) {
    GateBundle gates;
    for (std::size_t l = 0; l < names.size(); ++l)
      gates.emplace(names[l], GateParams{in[5 * l], in[5 * l + 1], in[5 * l + 2], in[5 * l + 3], in[5 * l + 4]});
    const FlowLoss fl = flow_matching_loss(attach_fusion(m, adapters, gates, adapters[0]), b, {.gates = true});
    if (grads) {
      grads->clear();
      for (const auto& name : names) {
        GateParams g = fl.grads.gates.at(name);
        for (Tensor* t : g.parameter_list()) grads->push_back(*t);
      }
    }
    return fl.loss;
  };
  return grad_check("flow_matching_loss", op, inputs);
}

TEST(FlowLoss, GateGradCheck) {
  for (auto [width, n, k] : {std::tuple{4, 2, 1}, {6, 4, 2}, {8, 5, 3}}) {
    GradReport r = check_flow_loss(30 + width, width, n, k);
    EXPECT_TRUE(r.passed) << width << " " << r.max_rel_err;
  }
}

TEST(SamplePair, BasicsAndDeterminism) {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    auto [a, b] = sample_pair(2, rng);
    EXPECT_NE(a, b);
    EXPECT_LT(a, 2u);
    EXPECT_LT(b, 2u);
  }
  Rng r1(6), r2(6);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(sample_pair(5, r1), sample_pair(5, r2));
  EXPECT_THROW(sample_pair(1, rng), ArgumentError);
  EXPECT_THROW(sample_pair(std::vector<LoRAAdapter>(1), rng), ArgumentError);
}

TEST(SamplePair, UnorderedPairsUniform) {
  Rng rng(7);
  std::map<std::pair<std::size_t, std::size_t>, int> counts;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    auto [a, b] = sample_pair(4, rng);
    counts[{std::min(a, b), std::max(a, b)}]++;
  }
  ASSERT_EQ(counts.size(), 6u);
  const double p = 1.0 / 6.0, mean = draws * p, sigma = std::sqrt(draws * p * (1 - p));
  for (const auto& [pair, c] : counts) EXPECT_LT(std::abs(c - mean), 3 * sigma);
}

class SmallFusion : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = small_config();
    base_ = init_toy_model(cfg_, 8);
    Rng rng(9);
    for (int i = 0; i < 3; ++i) {
      const std::string id = "ad" + std::to_string(i);
      pool_.push_back(testing::random_adapter(rng, id, hosted_shapes(base_), 2, 0.5));
      FlowDataset d{rng.gaussian_tensor({40, 2}, 0.3), rng.gaussian_tensor({1, cfg_.c_dim}, 1.0), {}};
      for (std::size_t r = 0; r < 40; ++r) d.points(r, 0) += double(i);
      Tensor c = Tensor::matrix(40, cfg_.c_dim);
      for (std::size_t r = 0; r < 40; ++r)
        for (std::size_t j = 0; j < cfg_.c_dim; ++j) c(r, j) = d.conditions[j];
      d.conditions = c;
      d.captions.assign(40, id);
      data_[id] = d;
    }
    config_.steps = 60;
    config_.batch_size = 32;
    config_.lr = 2e-2;
    config_.r_g = 2;
    config_.log_every = 20;
    config_.eval_pairs = 3;
    config_.eval_batch = 40;
  }
  static inline ToyModelConfig cfg_;
  static inline ToyModel base_;
  static inline std::vector<LoRAAdapter> pool_;
  static inline DatasetMap data_;
  static inline FusionTrainConfig config_;
};

TEST_F(SmallFusion, LossDecreasesAndDeterministic) {
  const ToyModel base_copy = base_;
  const auto pool_copy = pool_;
  FusionTrainResult a = train_fusion(base_, pool_, data_, config_, 0);
  ASSERT_EQ(a.log.size(), 4u);
  EXPECT_TRUE(std::isnan(a.log[0].loss));
  EXPECT_LT(a.log.back().eval_loss, a.log.front().eval_loss);
  FusionTrainResult b = train_fusion(base_, pool_, data_, config_, 0);
  EXPECT_EQ(fusion_log_jsonl(a.log), fusion_log_jsonl(b.log));
  EXPECT_EQ(encode_gates(a.gates), encode_gates(b.gates));
  EXPECT_NE(encode_gates(a.gates), encode_gates(train_fusion(base_, pool_, data_, config_, 1).gates));
  // Only gates moved.
  EXPECT_EQ(base_, base_copy);
  EXPECT_EQ(pool_, pool_copy);
  EXPECT_EQ(a.gates.size(), base_.lora_catalog().size());
}

TEST_F(SmallFusion, FrozenScaleKeepsBaseOutputs) {
  FusionTrainConfig c = config_;
  c.freeze_w_o = true;
  FusionTrainResult r = train_fusion(base_, pool_, data_, c, 0);
  // Every gate gradient passes through w_o, so nothing moves at all.
  for (const auto& [id, gp] : r.gates) EXPECT_EQ(gp, init_gate(gp.dim()));
  for (const auto& e : r.log) EXPECT_EQ(e.eval_loss, r.log.front().eval_loss);
  Rng rng(10);
  const Tensor f = rng.gaussian_tensor({12, cfg_.input_dim()}, 1.0);
  EXPECT_EQ(velocity(fused_handle(base_, pool_, r.gates, c), f), velocity(base_handle(base_), f));
}

TEST_F(SmallFusion, GlobalRankAndErrors) {
  GateBundle gates;
  for (const auto& e : base_.lora_catalog()) gates.emplace(e.layer_id, init_gate(e.d));
  const ModelHandle h = fused_handle(base_, {pool_[0], pool_[1]}, gates, FusionTrainConfig{.r_g = 3});
  ASSERT_TRUE(h.global.has_value());
  for (const auto& ld : h.global->layers) {
    EXPECT_LE(ld.r, 3u);
    EXPECT_EQ(ld.B.cols(), ld.r);
  }
  DatasetMap missing = data_;
  missing.erase("ad1");
  EXPECT_THROW(train_fusion(base_, pool_, missing, config_, 0), ArgumentError);
  EXPECT_THROW(train_fusion(base_, {pool_[0]}, data_, config_, 0), ArgumentError);
}

TEST_F(SmallFusion, MultipleInterferenceAdapters) {
  FusionTrainConfig c = config_;
  c.interference = 2;
  c.steps = 10;
  FusionTrainResult r = train_fusion(base_, pool_, data_, c, 0);
  EXPECT_EQ(r.log.back().step, 10u);
}

TEST_F(SmallFusion, EvalIdentities) {
  const FusionTrainResult trained = train_fusion(base_, pool_, data_, config_, 0);
  const EvalConfig ec{60, 5, 3};
  auto recs = eval_fusion(base_, trained.gates, pool_, {{"ad0", {}}}, data_, config_, ec);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].gated.flow_loss, recs[0].base.flow_loss);
  EXPECT_EQ(recs[0].direct.energy, recs[0].base.energy);

  // Saturated gates on a singleton set without the global branch match the
  // direct merge.
  GateBundle sat;
  for (const auto& e : base_.lora_catalog()) {
    GateParams p = init_gate(e.d);
    p.b.fill(40.0);
    p.w_o.fill(1.0);
    sat.emplace(e.layer_id, p);
  }
  FusionTrainConfig no_global = config_;
  no_global.use_global = false;
  recs = eval_fusion(base_, sat, pool_, {{"ad1", {"ad1"}}}, data_, no_global, ec);
  EXPECT_NEAR(recs[0].gated.flow_loss, recs[0].direct.flow_loss, 1e-5);
  EXPECT_NEAR(recs[0].gated.energy, recs[0].direct.energy, 1e-5);

  const auto sets = sample_eval_sets({"ad0", "ad1", "ad2"}, 2, 3, 4);
  for (const auto& s : sets) {
    EXPECT_EQ(s.target, s.adapters[0]);
    EXPECT_NE(s.adapters[0], s.adapters[1]);
  }
  const auto j1 = eval_report_json(eval_fusion(base_, trained.gates, pool_, sets, data_, config_, ec));
  const auto j2 = eval_report_json(eval_fusion(base_, trained.gates, pool_, sets, data_, config_, ec));
  EXPECT_EQ(j1.dump(), j2.dump());
  EXPECT_EQ(j1.at("count"), 3);
  EXPECT_THROW(eval_fusion(base_, trained.gates, pool_, {{"nope", {}}}, data_, config_, ec), ArgumentError);
}

}  // namespace
}  // namespace autolora
