#include "autolora/gate.h"

#include "autolora/container.h"
#include "autolora/lora.h"

namespace autolora {

namespace {

// Small enough that gates are scale invariant to ~1e-12 for activations of
// ordinary magnitude; all-zero rows still normalize to zero.
constexpr double kGateEps = 1e-12;
constexpr std::string_view kMagic = "LGAT";

void check_shapes(const FusionActivation& act, const GateParams& p) {
  if (act.x.rank() != 2) throw ArgumentError("fusion: x must be l x d");
  const std::size_t d = act.x.cols();
  for (const Tensor* t : {&p.w_x, &p.w_l, &p.w_c, &p.b, &p.w_o}) {
    if (t->size() != d) throw ArgumentError("fusion: gate vectors must have length " + std::to_string(d));
  }
  for (const Tensor& l : act.branches) {
    if (!l.same_shape(act.x)) {
      throw ArgumentError("fusion: branch " + l.shape_string() + " does not match x " + act.x.shape_string());
    }
  }
}

// Pre-activation of one adapter's gate, l x d.
Tensor preactivation_matrix(const Tensor& xn, const Tensor& ln, const GateParams& p) {
  Tensor pre(xn.shape());
  const std::size_t d = xn.cols();
  for (std::size_t t = 0; t < xn.rows(); ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      pre(t, j) = gate_preactivation(xn(t, j), ln(t, j), p.w_x[j], p.w_l[j], p.w_c[j], p.b[j]);
    }
  }
  return pre;
}

}  // namespace

GateParams init_gate(std::size_t d, std::uint64_t) {
  if (d == 0) throw ArgumentError("init_gate: d must be positive");
  return {Tensor::vector(d), Tensor::vector(d), Tensor::vector(d), Tensor::vector(d), Tensor::vector(d)};
}

GateMatrix compute_gates(const FusionActivation& act, const GateParams& p, GateMode mode, FusionCache* cache) {
  check_shapes(act, p);
  FusionCache local;
  FusionCache& c = cache ? *cache : local;
  const Tensor xn = layer_norm(act.x, kGateEps, &c.x_norm);
  c.branch_norms.assign(act.branches.size(), LayerNormCache{});
  c.gates.clear();
  for (std::size_t i = 0; i < act.branches.size(); ++i) {
    const Tensor ln = layer_norm(act.branches[i], kGateEps, &c.branch_norms[i]);
    Tensor pre = preactivation_matrix(xn, ln, p);
    if (mode == GateMode::Pooled) {
      Tensor pooled = sum_rows(pre) * (1.0 / static_cast<double>(pre.rows()));
      pre = pooled.reshaped({1, pooled.size()});
    }
    c.gates.push_back(sigmoid(pre));
  }
  return c.gates;
}

Tensor fuse_forward(const FusionActivation& act, const GateParams& p, GateMode mode, FusionCache* cache) {
  FusionCache local;
  FusionCache& c = cache ? *cache : local;
  compute_gates(act, p, mode, &c);
  Tensor out = act.x;
  const std::size_t d = out.cols();
  for (std::size_t i = 0; i < act.branches.size(); ++i) {
    const Tensor& g = c.gates[i];
    const Tensor& l = act.branches[i];
    for (std::size_t t = 0; t < out.rows(); ++t) {
      const std::size_t gt = mode == GateMode::Pooled ? 0 : t;
      for (std::size_t j = 0; j < d; ++j) out(t, j) += p.w_o[j] * g(gt, j) * l(t, j);
    }
  }
  return out;
}

FusionGrads fuse_backward(const FusionActivation& act, const GateParams& p, GateMode mode, const Tensor& upstream,
                          const FusionCache& c) {
  check_shapes(act, p);
  require_same_shape(upstream, act.x, "fuse_backward upstream");
  const std::size_t rows = act.x.rows(), d = act.x.cols();
  FusionGrads g{upstream, {}, init_gate(d)};
  Tensor dxn(act.x.shape());
  const Tensor& xn = c.x_norm.normalized;

  for (std::size_t i = 0; i < act.branches.size(); ++i) {
    const Tensor& l = act.branches[i];
    const Tensor& gate = c.gates[i];
    const Tensor& ln = c.branch_norms[i].normalized;
    Tensor dl(l.shape());
    Tensor dgate(gate.shape());
    for (std::size_t t = 0; t < rows; ++t) {
      const std::size_t gt = mode == GateMode::Pooled ? 0 : t;
      for (std::size_t j = 0; j < d; ++j) {
        const double u = upstream(t, j);
        g.dp.w_o[j] += u * gate(gt, j) * l(t, j);
        dl(t, j) = u * p.w_o[j] * gate(gt, j);
        dgate(gt, j) += u * p.w_o[j] * l(t, j);
      }
    }
    Tensor dpre = sigmoid_backward(dgate, gate);
    const double pool_scale = mode == GateMode::Pooled ? 1.0 / static_cast<double>(rows) : 1.0;
    Tensor dln(l.shape());
    for (std::size_t t = 0; t < rows; ++t) {
      const std::size_t gt = mode == GateMode::Pooled ? 0 : t;
      for (std::size_t j = 0; j < d; ++j) {
        const double dp = dpre(gt, j) * pool_scale;
        const double xh = xn(t, j), lh = ln(t, j);
        g.dp.b[j] += dp;
        g.dp.w_x[j] += dp * xh;
        g.dp.w_l[j] += dp * lh;
        g.dp.w_c[j] += dp * xh * lh;
        dxn(t, j) += dp * (p.w_x[j] + lh * p.w_c[j]);
        dln(t, j) = dp * (p.w_l[j] + xh * p.w_c[j]);
      }
    }
    dl += layer_norm_backward(dln, c.branch_norms[i]);
    g.dbranches.push_back(std::move(dl));
  }
  if (!act.branches.empty()) g.dx += layer_norm_backward(dxn, c.x_norm);
  return g;
}

std::string encode_gates(const GateBundle& gates) {
  Container c;
  nlohmann::json layers = nlohmann::json::object();
  for (const auto& [id, gp] : gates) {
    layers[id] = gp.dim();
    for (const Tensor* t : {&gp.w_x, &gp.w_l, &gp.w_c, &gp.b, &gp.w_o}) append_tensor(c.payload, *t);
  }
  c.manifest = {{"layers", layers}};
  return encode_container(kMagic, c);
}

GateBundle decode_gates(std::string_view bytes) {
  Container c = decode_container(kMagic, bytes);
  GateBundle gates;
  std::uint64_t offset = 0;
  try {
    for (const auto& [id, dim] : c.manifest.at("layers").items()) {
      const auto d = dim.get<std::size_t>();
      GateParams gp = init_gate(d);
      for (Tensor* t : gp.parameter_list()) {
        *t = read_tensor(c.payload, offset, {d});
        offset += d * sizeof(float);
      }
      gates.emplace(id, std::move(gp));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::Manifest, std::string("LGAT: malformed manifest: ") + e.what());
  }
  if (offset != c.payload.size() * sizeof(float)) {
    throw FormatError(FormatError::Kind::LengthMismatch, "LGAT: trailing payload");
  }
  return gates;
}

void save_gates(const GateBundle& gates, const std::filesystem::path& path) {
  write_file_bytes(path, encode_gates(gates));
}

GateBundle load_gates(const std::filesystem::path& path) { return decode_gates(read_file_bytes(path)); }

}  // namespace autolora
