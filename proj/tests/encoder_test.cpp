#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>

#include "autolora/encoder.h"
#include "autolora/grad_check.h"
#include "autolora/ops.h"
#include "test_util.h"

namespace autolora {
namespace {

using testing::random_adapter;
using testing::weighted_sum;

const LayerCatalog kCatalog = {{"l0", 6, 5}, {"l1", 6, 6}, {"l2", 4, 6}};

EncoderConfig small_config() { return {8, 2, 2, 16}; }

double cosine_distance(const Tensor& a, const Tensor& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return 1.0 - ab / std::sqrt(aa * bb);
}

// (B R, R^-1 A) for a random well-conditioned R.
LoRAAdapter reparameterize(const LoRAAdapter& a, Rng& rng) {
  LoRAAdapter out = a;
  for (LayerDelta& ld : out.layers) {
    Eigen::MatrixXd R(ld.r, ld.r);
    for (std::size_t i = 0; i < ld.r; ++i)
      for (std::size_t j = 0; j < ld.r; ++j) R(i, j) = rng.gaussian() + (i == j ? 3.0 : 0.0);
    Eigen::MatrixXd Rinv = R.inverse();
    Tensor r = Tensor::matrix(ld.r, ld.r), rinv = Tensor::matrix(ld.r, ld.r);
    for (std::size_t i = 0; i < ld.r; ++i)
      for (std::size_t j = 0; j < ld.r; ++j) {
        r(i, j) = R(i, j);
        rinv(i, j) = Rinv(i, j);
      }
    ld.B = matmul(ld.B, r);
    ld.A = matmul(rinv, ld.A);
  }
  return out;
}

TEST(InitEncoder, DeterministicAndShaped) {
  EncoderParams a = init_encoder(kCatalog, small_config(), 5);
  EncoderParams b = init_encoder(kCatalog, small_config(), 5);
  EXPECT_EQ(encode_encoder(a), encode_encoder(b));
  EXPECT_NE(encode_encoder(a), encode_encoder(init_encoder(kCatalog, small_config(), 6)));

  EncoderConfig wide{16, 1, 4, 32};
  EncoderParams c = init_encoder(kCatalog, wide, 5);
  EXPECT_EQ(c.cls.size(), 16u);
  EXPECT_EQ(c.tokens[0].w_hat.shape(), (std::vector<std::size_t>{6, 16}));
  EXPECT_EQ(c.tokens[0].q.size(), 5u);
  EXPECT_EQ(c.blocks.size(), 1u);
  EXPECT_EQ(c.positions.shape(), (std::vector<std::size_t>{3, 16}));
}

TEST(InitEncoder, RejectsBadCatalogs) {
  EXPECT_THROW(init_encoder({}, small_config(), 1), ArgumentError);
  EXPECT_THROW(init_encoder({{"a", 2, 2}, {"a", 2, 2}}, small_config(), 1), ArgumentError);
  EXPECT_THROW(init_encoder(kCatalog, EncoderConfig{6, 1, 4, 8}, 1), ArgumentError);
}

TEST(TokenEmbed, HandExample) {
  LayerDelta ld{"l", 2, 2, 1, Tensor::matrix(2, 1, {1, 0}), Tensor::matrix(1, 2, {1, 1}), 1.0};
  Tensor v = token_embed(ld, Tensor({2}, {1, 0}), Tensor::matrix(2, 2, {1, 0, 0, 1}));
  EXPECT_EQ(v, Tensor({2}, {1, 0}));
}

TEST(TokenEmbed, ZeroBIsZeroToken) {
  Rng rng(1);
  LayerDelta ld{"l", 5, 4, 2, Tensor::matrix(5, 2), rng.gaussian_tensor({2, 4}, 1.0), 3.0};
  Tensor v = token_embed(ld, rng.gaussian_tensor({4}, 1.0), rng.gaussian_tensor({5, 7}, 1.0));
  for (double x : v.values()) EXPECT_EQ(x, 0.0);
}

TEST(TokenEmbed, BackwardMatchesFiniteDifferences) {
  Rng rng(3);
  for (auto [d, k, r] : {std::tuple<std::size_t, std::size_t, std::size_t>{3, 2, 1}, {6, 5, 2}, {8, 8, 4}}) {
    const LayerDelta ld = random_adapter(rng, "t", {{"l", d, k}}, r, 1.5).layers[0];
    const Tensor w = rng.gaussian_tensor({7}, 1.0);
    ScalarFunction f = [&](const std::vector<Tensor>& in, std::vector<Tensor>* g) {
      if (g) {
        TokenGrads tg = token_embed_backward(ld, in[0], in[1], w);
        (*g)[0] = tg.dq;
        (*g)[1] = tg.dw_hat;
      }
      return weighted_sum(token_embed(ld, in[0], in[1]), w);
    };
    GradReport rep = grad_check("token_embed", f, {rng.gaussian_tensor({k}, 1.0), rng.gaussian_tensor({d, 7}, 1.0)});
    EXPECT_LT(rep.max_rel_err, 1e-6) << d << "x" << k;
  }
  const LayerDelta ld = random_adapter(rng, "t", {{"l", 4, 3}}, 2).layers[0];
  EXPECT_THROW(token_embed_backward(ld, Tensor::vector(3), Tensor::matrix(4, 5), Tensor::vector(4)), ArgumentError);
}

TEST(TokenEmbed, DependsOnlyOnProduct) {
  Rng rng(2);
  auto a = random_adapter(rng, "a", {{"l0", 6, 5}}, 3, 2.0);
  auto b = reparameterize(a, rng);
  Tensor q = rng.gaussian_tensor({5}, 1.0), w = rng.gaussian_tensor({6, 8}, 1.0);
  Tensor va = token_embed(a.layers[0], q, w), vb = token_embed(b.layers[0], q, w);
  // Dense oracle: ((alpha/r) B A q)^T W.
  Tensor dense = matmul(transpose(matmul(materialize_delta(a.layers[0]), q.reshaped({5, 1}))), w);
  for (std::size_t i = 0; i < va.size(); ++i) {
    EXPECT_NEAR(va[i], vb[i], 1e-9);
    EXPECT_NEAR(va[i], dense[i], 1e-12);
  }
}

TEST(TokenEmbed, DimensionMismatch) {
  Rng rng(3);
  auto a = random_adapter(rng, "a", {{"l0", 6, 5}}, 2);
  EXPECT_THROW(token_embed(a.layers[0], Tensor::vector(4), Tensor::matrix(6, 8)), ArgumentError);
  EXPECT_THROW(token_embed(a.layers[0], Tensor::vector(5), Tensor::matrix(5, 8)), ArgumentError);
}

TEST(EncodeLora, UnitNormAndErrors) {
  Rng rng(13);
  EncoderParams p = init_encoder(kCatalog, small_config(), 13);
  auto a = random_adapter(rng, "a", {{"l0", 6, 5}, {"l2", 4, 6}}, 2);
  Tensor e = encode_lora(a, p);
  EXPECT_NEAR(frobenius_norm(e), 1.0, 1e-12);

  auto unknown = random_adapter(rng, "u", {{"zz", 6, 5}}, 2);
  EXPECT_THROW(encode_lora(unknown, p), UnknownLayer);
  auto wrong_dims = random_adapter(rng, "w", {{"l0", 6, 6}}, 2);
  EXPECT_THROW(encode_lora(wrong_dims, p), ArgumentError);
}

TEST(EncodeLora, ZeroAdaptersOfDifferentRanksCoincide) {
  EncoderParams p = init_encoder(kCatalog, small_config(), 4);
  Rng rng(4);
  auto a = random_adapter(rng, "a", {{"l0", 6, 5}, {"l1", 6, 6}}, 1);
  auto b = random_adapter(rng, "b", {{"l0", 6, 5}, {"l1", 6, 6}}, 3);
  for (auto* ad : {&a, &b})
    for (auto& ld : ad->layers) ld.B.fill(0.0);
  EXPECT_EQ(encode_lora(a, p), encode_lora(b, p));
}

TEST(EncodeLora, RankReparameterizationInvariant) {
  EncoderParams p = init_encoder(kCatalog, small_config(), 7);
  Rng rng(7);
  for (int i = 0; i < 5; ++i) {
    auto a = random_adapter(rng, "a", {{"l0", 6, 5}, {"l1", 6, 6}, {"l2", 4, 6}}, 3);
    EXPECT_LT(cosine_distance(encode_lora(a, p), encode_lora(reparameterize(a, rng), p)), 1e-6);
  }
}

TEST(EncodeLora, MissingLayerIsOmittedNotZeroed) {
  EncoderParams p = init_encoder(kCatalog, small_config(), 8);
  Rng rng(8);
  auto sparse = random_adapter(rng, "s", {{"l0", 6, 5}, {"l2", 4, 6}}, 2);
  auto zeroed = sparse;
  LayerDelta zero{"l1", 6, 6, 1, Tensor::matrix(6, 1), Tensor::matrix(1, 6, 1.0), 1.0};
  zeroed.layers.insert(zeroed.layers.begin() + 1, zero);
  EXPECT_NE(encode_lora(sparse, p), encode_lora(zeroed, p));

  // Oracle: the two present tokens with their catalog positions, CLS first.
  Tensor x = Tensor::matrix(3, 8);
  const std::size_t present[] = {0, 2};
  for (std::size_t c = 0; c < 8; ++c) x(0, c) = p.cls[c];
  for (std::size_t t = 0; t < 2; ++t) {
    const std::size_t idx = present[t];
    Tensor v = token_embed(sparse.layers[t], p.tokens[idx].q, p.tokens[idx].w_hat);
    for (std::size_t c = 0; c < 8; ++c) x(t + 1, c) = v[c] + p.positions(idx, c);
  }
  for (const auto& block : p.blocks) x = attention_block(x, block);
  Tensor e = encode_lora(sparse, p);
  const double n = frobenius_norm(Tensor({8}, std::vector<double>(x.row(0).begin(), x.row(0).end())));
  for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(e[c], x(0, c) / n, 1e-14);

  // Layer order inside the adapter does not matter; catalog order does.
  auto reversed = sparse;
  std::swap(reversed.layers[0], reversed.layers[1]);
  EXPECT_EQ(encode_lora(reversed, p), e);
}

TEST(EncodePool, MatchesSingleEncoding) {
  EncoderParams p = init_encoder(kCatalog, small_config(), 9);
  Rng rng(9);
  std::vector<LoRAAdapter> pool;
  for (int i = 0; i < 4; ++i) pool.push_back(random_adapter(rng, "a" + std::to_string(i), {{"l1", 6, 6}}, 2));
  auto batch = encode_pool(pool, p);
  ASSERT_EQ(batch.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(batch[i], encode_lora(pool[i], p));
  std::vector<LoRAAdapter> permuted = {pool[2], pool[0], pool[3], pool[1]};
  auto pb = encode_pool(permuted, p);
  EXPECT_EQ(pb[0], batch[2]);
  EXPECT_EQ(pb[3], batch[1]);
  EXPECT_EQ(encode_pool({pool[1]}, p)[0], batch[1]);
}

// Gradient of <e, w> with respect to every encoder parameter on a 2-layer
// catalog. Key biases have an identically zero gradient and are excluded
// from the relative-error comparison.
TEST(EncodeLora, GradientMatchesFiniteDifferences) {
  const LayerCatalog catalog = {{"l0", 5, 4}, {"l1", 4, 5}};
  const EncoderConfig cfg{8, 2, 2, 12};
  Rng rng(31);
  for (int trial = 0; trial < 3; ++trial) {
    EncoderParams base = init_encoder(catalog, cfg, 40 + trial);
    for (auto& b : base.blocks) {
      b.ln1_gamma = rng.gaussian_tensor({8}, 0.3) + Tensor::vector(8, 1.0);
      b.ln2_beta = rng.gaussian_tensor({8}, 0.3);
      b.bq = rng.gaussian_tensor({8}, 0.3);
    }
    auto adapter = random_adapter(rng, "a", trial == 2 ? std::vector<testing::LayerShape>{{"l1", 4, 5}}
                                                       : std::vector<testing::LayerShape>{{"l0", 5, 4}, {"l1", 4, 5}},
                                  2, 1.5);
    const Tensor w = rng.gaussian_tensor({8}, 1.0);

    auto checked = [](const std::string& name) { return name.find(".bk") == std::string::npos; };
    std::vector<Tensor> inputs;
    base.visit([&](const std::string& name, Tensor& t) {
      if (checked(name)) inputs.push_back(t);
    });
    ScalarFunction f = [&](const std::vector<Tensor>& in, std::vector<Tensor>* g) {
      EncoderParams p = base;
      std::size_t i = 0;
      p.visit([&](const std::string& name, Tensor& t) {
        if (checked(name)) t = in[i++];
      });
      EncodeCache cache;
      Tensor e = encode_lora(adapter, p, &cache);
      if (g) {
        EncoderParams grads = p.zeros_like();
        encode_lora_backward(w, p, cache, grads);
        std::size_t j = 0;
        grads.visit([&](const std::string& name, Tensor& t) {
          if (checked(name)) (*g)[j++] = t;
        });
      }
      return weighted_sum(e, w);
    };
    GradReport r = grad_check("encode_lora", f, inputs);
    EXPECT_LT(r.max_rel_err, 1e-4) << "trial " << trial << " worst " << r.worst_index;
  }
}

TEST(EncoderContainer, RoundTripAndFingerprint) {
  const auto dir = std::filesystem::temp_directory_path() / "autolora_encoder_test";
  std::filesystem::create_directories(dir);
  EncoderParams p = init_encoder(kCatalog, small_config(), 10);
  save_encoder(p, dir / "enc.lenc");
  EncoderParams q = load_encoder(dir / "enc.lenc");
  EXPECT_EQ(encode_encoder(p), encode_encoder(q));
  EXPECT_EQ(encoder_fingerprint(p), encoder_fingerprint(q));
  q.cls[0] += 1.0;
  EXPECT_NE(encoder_fingerprint(p), encoder_fingerprint(q));

  std::string bytes = encode_encoder(p);
  EXPECT_THROW(decode_encoder(bytes.substr(0, bytes.size() - 4)), FormatError);
  bytes[1] = 'X';
  EXPECT_THROW(decode_encoder(bytes), FormatError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace autolora
