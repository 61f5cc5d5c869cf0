#pragma once

#include <vector>

#include "autolora/tensor.h"

namespace autolora {

// a (m x k) * b (k x n)
Tensor matmul(const Tensor& a, const Tensor& b);
// a (m x k) * b^T, b is (n x k)
Tensor matmul_bt(const Tensor& a, const Tensor& b);
// a^T * b, a is (k x m), b is (k x n)
Tensor matmul_at(const Tensor& a, const Tensor& b);

struct MatmulGrads {
  Tensor da;
  Tensor db;
};
MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dout);

// Adds a bias vector to every row.
void add_row_bias(Tensor& x, const Tensor& bias);
// Column sums of dout, the gradient of a row-broadcast bias.
Tensor sum_rows(const Tensor& dout);

// ---------------------------------------------------------------------------
// LayerNorm over the last axis, population variance.

struct LayerNormCache {
  Tensor normalized;           // (x - mean) * rstd
  std::vector<double> rstd;    // one per row
};

Tensor layer_norm(const Tensor& x, double eps = 1e-5, LayerNormCache* cache = nullptr);
Tensor layer_norm_backward(const Tensor& dy, const LayerNormCache& cache);

// LayerNorm followed by a learnable per-feature affine map.
Tensor layer_norm_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                         LayerNormCache* cache = nullptr);
struct LayerNormAffineGrads {
  Tensor dx;
  Tensor dgamma;
  Tensor dbeta;
};
LayerNormAffineGrads layer_norm_affine_backward(const Tensor& dy, const Tensor& gamma,
                                                const LayerNormCache& cache);

// ---------------------------------------------------------------------------
// Elementwise activations. Backward functions take the forward output or
// input as noted.

double sigmoid(double x);
Tensor sigmoid(const Tensor& x);
Tensor sigmoid_backward(const Tensor& dy, const Tensor& y);  // y = sigmoid(x)

// GELU, tanh approximation.
Tensor gelu(const Tensor& x);
Tensor gelu_backward(const Tensor& dy, const Tensor& x);

// SiLU, x * sigmoid(x).
Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& dy, const Tensor& x);

// Row-wise softmax over the last axis.
Tensor softmax(const Tensor& x);
Tensor softmax_backward(const Tensor& dy, const Tensor& y);  // y = softmax(x)

}  // namespace autolora
