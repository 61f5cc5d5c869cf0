#include "autolora/ops.h"

#include <cmath>
#include <numbers>

namespace autolora {

namespace {

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw ArgumentError(std::string(what) + ": expected a matrix, got " + t.shape_string());
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ArgumentError("matmul: inner dimensions differ " + a.shape_string() + " x " + b.shape_string());
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      const double* brow = b.row(p).data();
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_bt");
  require_matrix(b, "matmul_bt");
  if (a.cols() != b.cols()) {
    throw ArgumentError("matmul_bt: inner dimensions differ " + a.shape_string() + " x " + b.shape_string() + "^T");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.row(i).data();
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b.row(j).data();
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      out(i, j) = s;
    }
  }
  return out;
}

Tensor matmul_at(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_at");
  require_matrix(b, "matmul_at");
  if (a.rows() != b.rows()) {
    throw ArgumentError("matmul_at: inner dimensions differ " + a.shape_string() + "^T x " + b.shape_string());
  }
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a.row(p).data();
    const double* brow = b.row(p).data();
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* orow = &out(i, 0);
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dout) {
  return {matmul_bt(dout, b), matmul_at(a, dout)};
}

void add_row_bias(Tensor& x, const Tensor& bias) {
  if (bias.size() != x.cols()) throw ArgumentError("add_row_bias: bias length mismatch");
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
  }
}

Tensor sum_rows(const Tensor& dout) {
  Tensor out = Tensor::vector(dout.cols());
  for (std::size_t r = 0; r < dout.rows(); ++r) {
    auto row = dout.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) out[c] += row[c];
  }
  return out;
}

Tensor layer_norm(const Tensor& x, double eps, LayerNormCache* cache) {
  if (x.empty() || x.cols() == 0) throw ArgumentError("layer_norm: empty tensor");
  if (!(eps > 0.0)) throw ArgumentError("layer_norm: eps must be positive");
  const std::size_t n = x.cols();
  Tensor y(x.shape());
  std::vector<double> rstds(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    auto out = y.row(r);
    for (std::size_t c = 0; c < n; ++c) out[c] = (in[c] - mean) * rstd;
    rstds[r] = rstd;
  }
  if (cache) {
    cache->normalized = y;
    cache->rstd = std::move(rstds);
  }
  return y;
}

Tensor layer_norm_backward(const Tensor& dy, const LayerNormCache& cache) {
  require_same_shape(dy, cache.normalized, "layer_norm_backward");
  const std::size_t n = dy.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  Tensor dx(dy.shape());
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    auto g = dy.row(r);
    auto xh = cache.normalized.row(r);
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      sum_g += g[c];
      sum_gx += g[c] * xh[c];
    }
    auto out = dx.row(r);
    const double rstd = cache.rstd[r];
    for (std::size_t c = 0; c < n; ++c) {
      out[c] = rstd * (g[c] - inv_n * sum_g - xh[c] * inv_n * sum_gx);
    }
  }
  return dx;
}

Tensor layer_norm_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                         LayerNormCache* cache) {
  if (gamma.size() != x.cols() || beta.size() != x.cols()) {
    throw ArgumentError("layer_norm_affine: affine parameter length mismatch");
  }
  Tensor y = layer_norm(x, eps, cache);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = row[c] * gamma[c] + beta[c];
  }
  return y;
}

LayerNormAffineGrads layer_norm_affine_backward(const Tensor& dy, const Tensor& gamma,
                                                const LayerNormCache& cache) {
  LayerNormAffineGrads g{Tensor(dy.shape()), Tensor::vector(dy.cols()), Tensor::vector(dy.cols())};
  Tensor dnorm(dy.shape());
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    auto in = dy.row(r);
    auto xh = cache.normalized.row(r);
    auto out = dnorm.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) {
      g.dgamma[c] += in[c] * xh[c];
      g.dbeta[c] += in[c];
      out[c] = in[c] * gamma[c];
    }
  }
  g.dx = layer_norm_backward(dnorm, cache);
  return g;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid(x[i]);
  return y;
}

Tensor sigmoid_backward(const Tensor& dy, const Tensor& y) {
  require_same_shape(dy, y, "sigmoid_backward");
  Tensor dx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i] * (1.0 - y[i]);
  return dx;
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    y[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return y;
}

Tensor gelu_backward(const Tensor& dy, const Tensor& x) {
  require_same_shape(dy, x, "gelu_backward");
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    const double dth = (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    dx[i] = dy[i] * (0.5 * (1.0 + th) + 0.5 * v * dth);
  }
  return dx;
}

Tensor silu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * sigmoid(x[i]);
  return y;
}

Tensor silu_backward(const Tensor& dy, const Tensor& x) {
  require_same_shape(dy, x, "silu_backward");
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = sigmoid(x[i]);
    dx[i] = dy[i] * (s + x[i] * s * (1.0 - s));
  }
  return dx;
}

Tensor softmax(const Tensor& x) {
  if (x.empty()) throw ArgumentError("softmax: empty tensor");
  Tensor y(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto out = y.row(r);
    double mx = in[0];
    for (double v : in) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      out[c] = std::exp(in[c] - mx);
      sum += out[c];
    }
    for (double& v : out) v /= sum;
  }
  return y;
}

Tensor softmax_backward(const Tensor& dy, const Tensor& y) {
  require_same_shape(dy, y, "softmax_backward");
  Tensor dx(y.shape());
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto g = dy.row(r);
    auto s = y.row(r);
    double dot = 0.0;
    for (std::size_t c = 0; c < s.size(); ++c) dot += g[c] * s[c];
    auto out = dx.row(r);
    for (std::size_t c = 0; c < s.size(); ++c) out[c] = s[c] * (g[c] - dot);
  }
  return dx;
}

}  // namespace autolora
