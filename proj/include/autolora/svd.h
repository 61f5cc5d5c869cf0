#pragma once

#include <vector>

#include "autolora/lora.h"
#include "autolora/tensor.h"

namespace autolora {

struct SVDResult {
  Tensor U;               // d x r, orthonormal columns
  std::vector<double> S;  // length r, non-increasing
  Tensor V;               // k x r, orthonormal columns

  Tensor reconstruct() const;
};

// Rank-r truncation of the SVD of M, computed with one-sided Jacobi
// rotations. The first nonzero entry of every U column is non-negative.
SVDResult truncated_svd(const Tensor& M, std::size_t r);

// Sums the deltas of the given adapters per layer and factors each sum at
// rank r_g, splitting sqrt(S) into both factors: B = U sqrt(S), A = sqrt(S) V^T,
// alpha = r_g. Adapters are processed in adapter_id order so the result does
// not depend on the order of the input list.
LoRAAdapter build_global_lora(const std::vector<LoRAAdapter>& adapters, std::size_t r_g = 4);

}  // namespace autolora
