#include "autolora/attention.h"

#include <cmath>

namespace autolora {

namespace {

constexpr double kBlockEps = 1e-5;

Tensor slice_cols(const Tensor& m, std::size_t begin, std::size_t width) {
  Tensor out = Tensor::matrix(m.rows(), width);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < width; ++c) out(r, c) = m(r, begin + c);
  return out;
}

void add_cols(Tensor& dst, const Tensor& src, std::size_t begin) {
  for (std::size_t r = 0; r < src.rows(); ++r)
    for (std::size_t c = 0; c < src.cols(); ++c) dst(r, begin + c) += src(r, c);
}

}  // namespace

AttentionBlockParams AttentionBlockParams::zeros(std::size_t dim, std::size_t heads, std::size_t hidden) {
  AttentionBlockParams p;
  p.dim = dim;
  p.heads = heads;
  p.hidden = hidden;
  p.ln1_gamma = Tensor::vector(dim);
  p.ln1_beta = Tensor::vector(dim);
  p.wq = Tensor::matrix(dim, dim);
  p.wk = Tensor::matrix(dim, dim);
  p.wv = Tensor::matrix(dim, dim);
  p.wo = Tensor::matrix(dim, dim);
  p.bq = Tensor::vector(dim);
  p.bk = Tensor::vector(dim);
  p.bv = Tensor::vector(dim);
  p.bo = Tensor::vector(dim);
  p.ln2_gamma = Tensor::vector(dim);
  p.ln2_beta = Tensor::vector(dim);
  p.w1 = Tensor::matrix(hidden, dim);
  p.b1 = Tensor::vector(hidden);
  p.w2 = Tensor::matrix(dim, hidden);
  p.b2 = Tensor::vector(dim);
  return p;
}

AttentionBlockParams AttentionBlockParams::init(std::size_t dim, std::size_t heads, std::size_t hidden,
                                                Rng& rng) {
  if (dim == 0 || heads == 0 || dim % heads != 0) {
    throw ArgumentError("attention block: dim must be a positive multiple of heads");
  }
  AttentionBlockParams p = zeros(dim, heads, hidden);
  p.ln1_gamma.fill(1.0);
  p.ln2_gamma.fill(1.0);
  const double s_dim = 1.0 / std::sqrt(static_cast<double>(dim));
  const double s_hidden = 1.0 / std::sqrt(static_cast<double>(hidden));
  p.wq = rng.gaussian_tensor({dim, dim}, s_dim);
  p.wk = rng.gaussian_tensor({dim, dim}, s_dim);
  p.wv = rng.gaussian_tensor({dim, dim}, s_dim);
  p.wo = rng.gaussian_tensor({dim, dim}, s_dim);
  p.w1 = rng.gaussian_tensor({hidden, dim}, s_dim);
  p.w2 = rng.gaussian_tensor({dim, hidden}, s_hidden);
  return p;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul_bt(x, w);
  add_row_bias(y, b);
  return y;
}

Tensor linear_backward(const Tensor& dy, const Tensor& x, const Tensor& w, Tensor& dw, Tensor& db) {
  dw += matmul_at(dy, x);
  db += sum_rows(dy);
  return matmul(dy, w);
}

Tensor attention_block(const Tensor& x, const AttentionBlockParams& p, AttentionBlockCache* cache) {
  if (x.rank() != 2 || x.cols() != p.dim) {
    throw ArgumentError("attention_block: expected (m x " + std::to_string(p.dim) + "), got " + x.shape_string());
  }
  const std::size_t m = x.rows();
  const std::size_t hd = p.dim / p.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  AttentionBlockCache local;
  AttentionBlockCache& c = cache ? *cache : local;
  c.x = x;
  c.a1 = layer_norm_affine(x, p.ln1_gamma, p.ln1_beta, kBlockEps, &c.ln1);
  c.q = linear(c.a1, p.wq, p.bq);
  c.k = linear(c.a1, p.wk, p.bk);
  c.v = linear(c.a1, p.wv, p.bv);
  c.probs.assign(p.heads, Tensor());
  c.concat = Tensor::matrix(m, p.dim);
  for (std::size_t h = 0; h < p.heads; ++h) {
    const Tensor qh = slice_cols(c.q, h * hd, hd);
    const Tensor kh = slice_cols(c.k, h * hd, hd);
    const Tensor vh = slice_cols(c.v, h * hd, hd);
    c.probs[h] = softmax(matmul_bt(qh, kh) * scale);
    add_cols(c.concat, matmul(c.probs[h], vh), h * hd);
  }
  c.h1 = x + linear(c.concat, p.wo, p.bo);
  c.a2 = layer_norm_affine(c.h1, p.ln2_gamma, p.ln2_beta, kBlockEps, &c.ln2);
  c.z = linear(c.a2, p.w1, p.b1);
  c.g = gelu(c.z);
  return c.h1 + linear(c.g, p.w2, p.b2);
}

Tensor attention_block_backward(const Tensor& dy, const AttentionBlockParams& p,
                                const AttentionBlockCache& c, AttentionBlockParams& grads) {
  const std::size_t hd = p.dim / p.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // MLP branch
  Tensor dg = linear_backward(dy, c.g, p.w2, grads.w2, grads.b2);
  Tensor dz = gelu_backward(dg, c.z);
  Tensor da2 = linear_backward(dz, c.a2, p.w1, grads.w1, grads.b1);
  auto ln2 = layer_norm_affine_backward(da2, p.ln2_gamma, c.ln2);
  grads.ln2_gamma += ln2.dgamma;
  grads.ln2_beta += ln2.dbeta;
  Tensor dh1 = dy + ln2.dx;

  // Attention branch
  Tensor dconcat = linear_backward(dh1, c.concat, p.wo, grads.wo, grads.bo);
  Tensor dq = Tensor::matrix(c.q.rows(), p.dim);
  Tensor dk = Tensor::matrix(c.k.rows(), p.dim);
  Tensor dv = Tensor::matrix(c.v.rows(), p.dim);
  for (std::size_t h = 0; h < p.heads; ++h) {
    const Tensor qh = slice_cols(c.q, h * hd, hd);
    const Tensor kh = slice_cols(c.k, h * hd, hd);
    const Tensor vh = slice_cols(c.v, h * hd, hd);
    const Tensor doh = slice_cols(dconcat, h * hd, hd);
    const Tensor& probs = c.probs[h];
    add_cols(dv, matmul_at(probs, doh), h * hd);
    Tensor dscores = softmax_backward(matmul_bt(doh, vh), probs) * scale;
    add_cols(dq, matmul(dscores, kh), h * hd);
    add_cols(dk, matmul_at(dscores, qh), h * hd);
  }
  Tensor da1 = linear_backward(dq, c.a1, p.wq, grads.wq, grads.bq);
  da1 += linear_backward(dk, c.a1, p.wk, grads.wk, grads.bk);
  da1 += linear_backward(dv, c.a1, p.wv, grads.wv, grads.bv);
  auto ln1 = layer_norm_affine_backward(da1, p.ln1_gamma, c.ln1);
  grads.ln1_gamma += ln1.dgamma;
  grads.ln1_beta += ln1.dbeta;
  return dh1 + ln1.dx;
}

}  // namespace autolora
