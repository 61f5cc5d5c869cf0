#include "autolora/svd.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "autolora/ops.h"

namespace autolora {

namespace {

struct FullSvd {
  Tensor U;  // rows x n
  std::vector<double> S;
  Tensor V;  // n x n
};

// One-sided Jacobi on a tall matrix (rows >= cols). Columns are rotated
// until every pair is orthogonal to working precision.
FullSvd jacobi_svd_tall(Tensor work) {
  const std::size_t rows = work.rows();
  const std::size_t n = work.cols();
  Tensor V = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) V(i, i) = 1.0;

  const double tol = std::numeric_limits<double>::epsilon();
  constexpr int kMaxSweeps = 80;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          const double wp = work(i, p), wq = work(i, q);
          alpha += wp * wp;
          beta += wq * wq;
          gamma += wp * wq;
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double wp = work(i, p), wq = work(i, q);
          work(i, p) = c * wp - s * wq;
          work(i, q) = s * wp + c * wq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = V(i, p), vq = V(i, q);
          V(i, p) = c * vp - s * vq;
          V(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < rows; ++i) s += work(i, j) * work(i, j);
    norms[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

  FullSvd out{Tensor::matrix(rows, n), std::vector<double>(n), Tensor::matrix(n, n)};
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    out.S[j] = norms[src];
    for (std::size_t i = 0; i < rows; ++i) out.U(i, j) = out.S[j] > 0.0 ? work(i, src) / out.S[j] : 0.0;
    for (std::size_t i = 0; i < n; ++i) out.V(i, j) = V(i, src);
  }
  return out;
}

// Replaces column j of U with a unit vector orthogonal to columns [0, j).
void complete_column(Tensor& U, std::size_t j) {
  const std::size_t rows = U.rows();
  for (std::size_t candidate = 0; candidate < rows; ++candidate) {
    std::vector<double> v(rows, 0.0);
    v[candidate] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t c = 0; c < j; ++c) {
        double dot = 0.0;
        for (std::size_t i = 0; i < rows; ++i) dot += U(i, c) * v[i];
        for (std::size_t i = 0; i < rows; ++i) v[i] -= dot * U(i, c);
      }
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0.5) {
      for (std::size_t i = 0; i < rows; ++i) U(i, j) = v[i] / norm;
      return;
    }
  }
}

}  // namespace

Tensor SVDResult::reconstruct() const {
  Tensor scaled = U;
  for (std::size_t i = 0; i < scaled.rows(); ++i)
    for (std::size_t j = 0; j < S.size(); ++j) scaled(i, j) *= S[j];
  return matmul_bt(scaled, V);
}

SVDResult truncated_svd(const Tensor& M, std::size_t r) {
  if (M.rank() != 2 || M.empty()) throw ArgumentError("truncated_svd: expected a non-empty matrix");
  const std::size_t d = M.rows(), k = M.cols();
  if (r == 0 || r > std::min(d, k)) {
    throw ArgumentError("truncated_svd: rank " + std::to_string(r) + " outside [1, " +
                        std::to_string(std::min(d, k)) + "]");
  }
  require_finite(M, "truncated_svd");

  const bool wide = d < k;
  FullSvd full = jacobi_svd_tall(wide ? transpose(M) : M);
  // For a wide M we factored M^T = U' S V'^T, so M = V' S U'^T.
  Tensor left = wide ? full.V : full.U;
  Tensor right = wide ? full.U : full.V;

  SVDResult out{Tensor::matrix(d, r), std::vector<double>(full.S.begin(), full.S.begin() + r),
                Tensor::matrix(k, r)};
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < r; ++j) out.U(i, j) = left(i, j);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < r; ++j) out.V(i, j) = right(i, j);

  // Singular directions of a numerically zero singular value are arbitrary.
  // The Jacobi factor is orthogonal already; the normalized-column factor
  // gets an orthonormal completion.
  const double smax = full.S.front();
  const double zero_tol = static_cast<double>(std::max(d, k)) * std::numeric_limits<double>::epsilon() * smax;
  for (std::size_t j = 0; j < r; ++j) {
    if (out.S[j] > zero_tol && out.S[j] > 0.0) continue;
    complete_column(wide ? out.V : out.U, j);
  }

  for (std::size_t j = 0; j < r; ++j) {
    double lead = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      if (std::abs(out.U(i, j)) > 1e-12) {
        lead = out.U(i, j);
        break;
      }
    }
    if (lead < 0.0) {
      for (std::size_t i = 0; i < d; ++i) out.U(i, j) = -out.U(i, j);
      for (std::size_t i = 0; i < k; ++i) out.V(i, j) = -out.V(i, j);
    }
  }
  return out;
}

LoRAAdapter build_global_lora(const std::vector<LoRAAdapter>& adapters, std::size_t r_g) {
  if (adapters.empty()) throw ArgumentError("build_global_lora: no adapters");
  if (r_g == 0) throw ArgumentError("build_global_lora: r_g must be positive");

  std::vector<LoRAAdapter> sorted = adapters;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const LoRAAdapter& a, const LoRAAdapter& b) { return a.adapter_id < b.adapter_id; });

  std::vector<std::string> layer_ids;
  for (const LoRAAdapter& a : sorted) {
    for (const LayerDelta& ld : a.layers) {
      if (std::find(layer_ids.begin(), layer_ids.end(), ld.layer_id) == layer_ids.end()) {
        layer_ids.push_back(ld.layer_id);
      }
    }
  }

  LoRAAdapter global;
  global.adapter_id = "global(";
  for (std::size_t i = 0; i < sorted.size(); ++i) global.adapter_id += (i ? "+" : "") + sorted[i].adapter_id;
  global.adapter_id += ")";
  global.metadata["kind"] = "global";
  global.metadata["r_g"] = std::to_string(r_g);

  for (const std::string& id : layer_ids) {
    const Tensor total = sum_deltas(sorted, id);
    const SVDResult svd = truncated_svd(total, r_g);
    LayerDelta ld;
    ld.layer_id = id;
    ld.d = total.rows();
    ld.k = total.cols();
    ld.r = r_g;
    ld.alpha = static_cast<double>(r_g);
    ld.B = Tensor::matrix(ld.d, r_g);
    ld.A = Tensor::matrix(r_g, ld.k);
    for (std::size_t j = 0; j < r_g; ++j) {
      const double root = std::sqrt(svd.S[j]);
      for (std::size_t i = 0; i < ld.d; ++i) ld.B(i, j) = svd.U(i, j) * root;
      for (std::size_t i = 0; i < ld.k; ++i) ld.A(j, i) = svd.V(i, j) * root;
    }
    global.layers.push_back(std::move(ld));
  }
  return global;
}

}  // namespace autolora
