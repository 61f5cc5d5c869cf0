#include "autolora/fused_model.h"

#include <algorithm>

#include "autolora/attention.h"

namespace autolora {

namespace {

void check_adapters(const ToyModel& base, const std::vector<LoRAAdapter>& adapters,
                    const std::optional<LoRAAdapter>& global) {
  auto check = [&](const LoRAAdapter& a) {
    a.validate();
    for (const auto& ld : a.layers) {
      const DenseLayer* host = nullptr;
      for (std::size_t i = 0; i < base.hidden_count(); ++i) {
        if (base.layers[i].name == ld.layer_id) host = &base.layers[i];
      }
      if (!host) throw ArgumentError("adapter " + a.adapter_id + ": no hosted layer '" + ld.layer_id + "'");
      if (host->weight.rows() != ld.d || host->weight.cols() != ld.k) {
        throw ArgumentError("adapter " + a.adapter_id + ": layer " + ld.layer_id + " is " + std::to_string(ld.d) +
                            "x" + std::to_string(ld.k) + ", host is " + host->weight.shape_string());
      }
    }
  };
  for (const auto& a : adapters) check(a);
  if (global) check(*global);
}

Tensor branch_forward(const LayerDelta& ld, const Tensor& input, Tensor& proj) {
  proj = matmul_bt(input, ld.A);
  Tensor out = matmul_bt(proj, ld.B);
  out *= ld.scale();
  return out;
}

}  // namespace

std::vector<const LayerDelta*> ModelHandle::branches(const std::string& name) const {
  std::vector<const LayerDelta*> out;
  if (kind == FusionKind::Base) return out;
  for (const auto& a : adapters) {
    if (const LayerDelta* ld = a.find(name)) out.push_back(ld);
  }
  if (global) {
    if (const LayerDelta* ld = global->find(name)) out.push_back(ld);
  }
  return out;
}

ModelHandle base_handle(const ToyModel& base) {
  ModelHandle h;
  h.base = &base;
  return h;
}

ModelHandle attach_direct(const ToyModel& base, std::vector<LoRAAdapter> adapters, double scale,
                          std::optional<LoRAAdapter> global) {
  check_adapters(base, adapters, global);
  ModelHandle h = base_handle(base);
  h.adapters = std::move(adapters);
  h.global = std::move(global);
  h.kind = FusionKind::Direct;
  h.direct_scale = scale;
  return h;
}

ModelHandle attach_fusion(const ToyModel& base, std::vector<LoRAAdapter> adapters, GateBundle gates,
                          std::optional<LoRAAdapter> global, GateMode mode) {
  check_adapters(base, adapters, global);
  ModelHandle h = base_handle(base);
  h.adapters = std::move(adapters);
  h.global = std::move(global);
  h.kind = FusionKind::Gated;
  h.gate_mode = mode;
  for (const auto& [name, gp] : gates) {
    const DenseLayer& host = base.layer(name);
    if (gp.dim() != host.weight.rows()) {
      throw ArgumentError("gate for " + name + " has width " + std::to_string(gp.dim()) + ", layer output is " +
                          std::to_string(host.weight.rows()));
    }
  }
  h.gates = std::move(gates);
  for (std::size_t i = 0; i < base.hidden_count(); ++i) {
    const auto& name = base.layers[i].name;
    if (!h.branches(name).empty() && !h.gates.count(name)) {
      throw ArgumentError("attach_fusion: no gate for adapted layer " + name);
    }
  }
  return h;
}

Tensor velocity(const ModelHandle& h, const Tensor& features, ForwardCache* cache) {
  if (!h.base) throw ArgumentError("velocity: handle has no base model");
  const ToyModel& m = *h.base;
  if (features.rank() != 2 || features.cols() != m.config.input_dim()) {
    throw ArgumentError("velocity: features must be n x " + std::to_string(m.config.input_dim()));
  }
  if (cache) cache->layers.assign(m.layers.size(), LayerTrace{});
  Tensor act = features;
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    const DenseLayer& layer = m.layers[li];
    LayerTrace local;
    LayerTrace& tr = cache ? cache->layers[li] : local;
    tr.input = std::move(act);
    tr.base_out = linear(tr.input, layer.weight, layer.bias);
    const auto deltas = h.branches(layer.name);
    tr.projections.assign(deltas.size(), Tensor{});
    tr.branch_out.clear();
    for (std::size_t b = 0; b < deltas.size(); ++b) {
      tr.branch_out.push_back(branch_forward(*deltas[b], tr.input, tr.projections[b]));
    }
    if (deltas.empty()) {
      tr.fused = tr.base_out;
    } else if (h.kind == FusionKind::Direct) {
      tr.fused = tr.base_out;
      for (const auto& l : tr.branch_out) tr.fused += l * h.direct_scale;
    } else {
      FusionActivation fa{tr.base_out, tr.branch_out};
      tr.fused = fuse_forward(fa, h.gates.at(layer.name), h.gate_mode, &tr.fusion);
    }
    const bool head = li + 1 == m.layers.size();
    act = head ? tr.fused : silu(tr.fused);
  }
  return act;
}

HandleGrads velocity_backward(const ModelHandle& h, const Tensor& dv, const ForwardCache& cache,
                              GradRequest request) {
  const ToyModel& m = *h.base;
  if (cache.layers.size() != m.layers.size()) throw ArgumentError("velocity_backward: cache does not match model");
  HandleGrads g;
  if (request.base) {
    for (const auto& l : m.layers) {
      g.base.push_back({l.name, Tensor(l.weight.shape()), Tensor(l.bias.shape())});
    }
  }
  if (request.adapters) {
    for (const auto& a : h.adapters) {
      AdapterGrads ag;
      for (const auto& ld : a.layers) {
        ag.dB.emplace_back(ld.B.shape());
        ag.dA.emplace_back(ld.A.shape());
      }
      g.adapters.push_back(std::move(ag));
    }
  }

  Tensor grad = dv;
  for (std::size_t li = m.layers.size(); li-- > 0;) {
    const DenseLayer& layer = m.layers[li];
    const LayerTrace& tr = cache.layers[li];
    const bool head = li + 1 == m.layers.size();
    Tensor dfused = head ? grad : silu_backward(grad, tr.fused);

    const auto deltas = h.branches(layer.name);
    Tensor dbase;
    std::vector<Tensor> dbranch;
    if (deltas.empty()) {
      dbase = dfused;
    } else if (h.kind == FusionKind::Direct) {
      dbase = dfused;
      dbranch.assign(deltas.size(), dfused * h.direct_scale);
    } else {
      FusionActivation fa{tr.base_out, tr.branch_out};
      const GateParams& gp = h.gates.at(layer.name);
      FusionGrads fg = fuse_backward(fa, gp, h.gate_mode, dfused, tr.fusion);
      dbase = std::move(fg.dx);
      dbranch = std::move(fg.dbranches);
      if (request.gates) g.gates.emplace(layer.name, std::move(fg.dp));
    }

    Tensor dw(layer.weight.shape()), db(layer.bias.shape());
    Tensor dinput = linear_backward(dbase, tr.input, layer.weight, dw, db);
    if (request.base) {
      g.base[li].weight += dw;
      g.base[li].bias += db;
    }
    for (std::size_t b = 0; b < deltas.size(); ++b) {
      const LayerDelta& ld = *deltas[b];
      // out = s * (input A^T) B^T
      Tensor dout = dbranch[b] * ld.scale();
      Tensor dproj = matmul(dout, ld.B);  // n x r
      dinput += matmul(dproj, ld.A);
      if (!request.adapters) continue;
      // Only the listed adapters are trainable; the global branch is fixed.
      for (std::size_t ai = 0; ai < h.adapters.size(); ++ai) {
        const auto& layers = h.adapters[ai].layers;
        for (std::size_t q = 0; q < layers.size(); ++q) {
          if (&layers[q] != &ld) continue;
          g.adapters[ai].dB[q] += matmul_at(dout, tr.projections[b]);
          g.adapters[ai].dA[q] += matmul_at(dproj, tr.input);
        }
      }
    }
    grad = std::move(dinput);
  }
  g.dfeatures = std::move(grad);
  return g;
}

}  // namespace autolora
