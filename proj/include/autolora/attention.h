#pragma once

#include <string>
#include <vector>

#include "autolora/ops.h"
#include "autolora/rng.h"

namespace autolora {

// Pre-norm transformer block: multi-head self-attention and a two-layer GELU
// MLP, each wrapped in a residual connection. Linear weights are stored
// (out x in) and applied as x * W^T + b.
struct AttentionBlockParams {
  std::size_t dim = 0;
  std::size_t heads = 0;
  std::size_t hidden = 0;
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor w1, b1, w2, b2;

  // Shapes only, all zeros (useful as a gradient accumulator).
  static AttentionBlockParams zeros(std::size_t dim, std::size_t heads, std::size_t hidden);
  static AttentionBlockParams init(std::size_t dim, std::size_t heads, std::size_t hidden, Rng& rng);

  template <typename F>
  void visit(F&& f) {
    f("ln1_gamma", ln1_gamma); f("ln1_beta", ln1_beta);
    f("wq", wq); f("bq", bq); f("wk", wk); f("bk", bk);
    f("wv", wv); f("bv", bv); f("wo", wo); f("bo", bo);
    f("ln2_gamma", ln2_gamma); f("ln2_beta", ln2_beta);
    f("w1", w1); f("b1", b1); f("w2", w2); f("b2", b2);
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<AttentionBlockParams*>(this)->visit(
        [&](const char* name, Tensor& t) { f(name, static_cast<const Tensor&>(t)); });
  }
};

struct AttentionBlockCache {
  Tensor x;
  LayerNormCache ln1;
  Tensor a1, q, k, v;
  std::vector<Tensor> probs;  // per head, m x m
  Tensor concat;
  Tensor h1;
  LayerNormCache ln2;
  Tensor a2, z, g;
};

// x is (m x dim); the output has the same shape.
Tensor attention_block(const Tensor& x, const AttentionBlockParams& p, AttentionBlockCache* cache = nullptr);

// Returns dx; parameter gradients are accumulated into grads.
Tensor attention_block_backward(const Tensor& dy, const AttentionBlockParams& p,
                                const AttentionBlockCache& cache, AttentionBlockParams& grads);

// y = x * W^T + b
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// Returns dx and accumulates dW, db.
Tensor linear_backward(const Tensor& dy, const Tensor& x, const Tensor& w, Tensor& dw, Tensor& db);

}  // namespace autolora
