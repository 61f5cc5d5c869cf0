#include "autolora/retriever.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "autolora/adam.h"
#include "autolora/container.h"
#include "autolora/ops.h"

namespace autolora {

namespace {

constexpr std::string_view kIndexMagic = "LIDX";
const double kNaN = std::numeric_limits<double>::quiet_NaN();

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace

ContrastiveResult contrastive_loss(const Tensor& E, const Tensor& T, double scale) {
  if (E.rank() != 2 || T.rank() != 2 || !E.same_shape(T)) {
    throw ArgumentError("contrastive_loss: E and T must be matrices of equal shape");
  }
  const std::size_t n = E.rows();
  if (n < 2) throw ArgumentError("contrastive_loss: need at least two pairs");

  Tensor sim = matmul_bt(E, T);
  Tensor logits = sim * scale;
  const Tensor p_row = softmax(logits);
  const Tensor p_col = transpose(softmax(transpose(logits)));

  ContrastiveResult r;
  r.row_terms.resize(n);
  r.col_terms.resize(n);
  Tensor dlogits = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    // log-sum-exp for numerically stable terms
    double row_max = logits(i, 0), col_max = logits(0, i);
    for (std::size_t j = 0; j < n; ++j) {
      row_max = std::max(row_max, logits(i, j));
      col_max = std::max(col_max, logits(j, i));
    }
    double row_sum = 0.0, col_sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row_sum += std::exp(logits(i, j) - row_max);
      col_sum += std::exp(logits(j, i) - col_max);
    }
    r.row_terms[i] = row_max + std::log(row_sum) - logits(i, i);
    r.col_terms[i] = col_max + std::log(col_sum) - logits(i, i);
    r.loss += r.row_terms[i] + r.col_terms[i];
    for (std::size_t j = 0; j < n; ++j) {
      dlogits(i, j) += p_row(i, j) + p_col(i, j) - (i == j ? 2.0 : 0.0);
    }
  }
  for (std::size_t i = 0; i < n * n; ++i) r.grad_log_scale += dlogits[i] * logits[i];
  Tensor dsim = dlogits * scale;
  r.grad_e = matmul(dsim, T);
  r.grad_t = matmul_at(dsim, E);
  return r;
}

RetrievalIndex build_index(const std::vector<LoRAAdapter>& pool, const EncoderParams& params) {
  RetrievalIndex index;
  index.out_dim = params.config.out_dim;
  index.embeddings = Tensor::matrix(0, index.out_dim);
  index.encoder_fingerprint = encoder_fingerprint(params);
  append_to_index(index, pool, params);
  return index;
}

void append_to_index(RetrievalIndex& index, const std::vector<LoRAAdapter>& adapters, const EncoderParams& params) {
  if (params.config.out_dim != index.out_dim || encoder_fingerprint(params) != index.encoder_fingerprint) {
    throw ArgumentError("append_to_index: encoder differs from the one that built the index");
  }
  std::set<std::string> ids(index.ids.begin(), index.ids.end());
  for (const LoRAAdapter& a : adapters) {
    if (!ids.insert(a.adapter_id).second) throw ArgumentError("duplicate adapter id '" + a.adapter_id + "' in index");
  }
  const std::vector<Tensor> rows = encode_pool(adapters, params);
  std::vector<double> data = index.embeddings.values();
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    index.ids.push_back(adapters[i].adapter_id);
    for (double v : rows[i].values()) data.push_back(static_cast<float>(v));
  }
  index.embeddings = Tensor({index.ids.size(), index.out_dim}, std::move(data));
}

std::vector<ScoredId> query_topk(const RetrievalIndex& index, const Tensor& query, std::size_t k) {
  if (k < 1 || k > index.size()) {
    throw ArgumentError("query_topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(index.size()) + "]");
  }
  if (query.size() != index.out_dim) throw ArgumentError("query_topk: query dimension mismatch");
  const double qn = norm(query.values());
  if (!(qn > 0.0)) throw ArgumentError("query_topk: zero query vector");

  std::vector<ScoredId> scored;
  scored.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto row = index.embeddings.row(i);
    const double rn = norm(row);
    double s = rn > 0.0 ? dot(row, query.values()) / (rn * qn) : 0.0;
    scored.emplace_back(index.ids[i], std::clamp(s, -1.0, 1.0));
  }
  const auto better = [](const ScoredId& a, const ScoredId& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(), better);
  scored.resize(k);
  return scored;
}

void save_index(const RetrievalIndex& index, const std::filesystem::path& path) {
  Container c;
  append_tensor(c.payload, index.embeddings);
  c.manifest = {{"out_dim", index.out_dim},
                {"count", index.size()},
                {"ids", index.ids},
                {"encoder_fingerprint", index.encoder_fingerprint}};
  write_container(path, kIndexMagic, c);
}

RetrievalIndex load_index(const std::filesystem::path& path) {
  Container c = read_container(path, kIndexMagic);
  RetrievalIndex index;
  try {
    index.out_dim = c.manifest.at("out_dim").get<std::size_t>();
    index.ids = c.manifest.at("ids").get<std::vector<std::string>>();
    index.encoder_fingerprint = c.manifest.at("encoder_fingerprint").get<std::string>();
    if (c.manifest.at("count").get<std::size_t>() != index.ids.size()) {
      throw FormatError(FormatError::Kind::Manifest, "LIDX: count does not match ids");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::Manifest, std::string("LIDX: malformed manifest: ") + e.what());
  }
  const std::size_t expected = index.ids.size() * index.out_dim;
  if (c.payload.size() < expected) throw FormatError(FormatError::Kind::Truncated, "LIDX: payload truncated");
  if (c.payload.size() > expected) throw FormatError(FormatError::Kind::LengthMismatch, "LIDX: trailing payload");
  index.embeddings = read_tensor(c.payload, 0, {index.ids.size(), index.out_dim});
  return index;
}

Heatmap similarity_heatmap(const RetrievalIndex& index, const std::map<std::string, std::string>& grouping) {
  if (grouping.size() != index.size()) throw ArgumentError("similarity_heatmap: grouping does not cover the index");
  std::vector<std::string> groups;
  for (const std::string& id : index.ids) {
    auto it = grouping.find(id);
    if (it == grouping.end()) throw ArgumentError("similarity_heatmap: no group for '" + id + "'");
    groups.push_back(it->second);
  }
  const std::size_t n = index.size();
  Heatmap h{Tensor::matrix(n, n), 0.0, 0.0};
  double intra = 0.0, inter = 0.0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto a = index.embeddings.row(i), b = index.embeddings.row(j);
      const double denom = norm(a) * norm(b);
      const double s = denom > 0.0 ? std::clamp(dot(a, b) / denom, -1.0, 1.0) : 0.0;
      h.similarity(i, j) = s;
      if (i == j) continue;
      if (groups[i] == groups[j]) {
        intra += s;
        ++n_intra;
      } else {
        inter += s;
        ++n_inter;
      }
    }
  }
  h.intra_mean = n_intra ? intra / static_cast<double>(n_intra) : kNaN;
  h.inter_mean = n_inter ? inter / static_cast<double>(n_inter) : kNaN;
  return h;
}

double recall_at_k(const RetrievalIndex& index, const std::vector<CaptionPair>& pairs, const TextConfig& text,
                   std::size_t k) {
  if (pairs.empty()) return kNaN;
  std::size_t hits = 0;
  for (const CaptionPair& p : pairs) {
    for (const auto& [id, score] : query_topk(index, caption_embedding(p, text), std::min(k, index.size()))) {
      if (id == p.adapter_id) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

namespace {

struct CaptionBank {
  std::vector<std::size_t> adapters;               // pool indices that have captions
  std::vector<std::vector<Tensor>> embeddings;     // parallel to adapters
};

CaptionBank make_bank(const std::vector<LoRAAdapter>& pool, const std::vector<CaptionPair>& pairs,
                      const TextConfig& text) {
  std::map<std::string, std::size_t> slot;
  for (std::size_t i = 0; i < pool.size(); ++i) slot[pool[i].adapter_id] = i;
  std::map<std::size_t, std::vector<Tensor>> by_adapter;
  for (const CaptionPair& p : pairs) {
    auto it = slot.find(p.adapter_id);
    if (it == slot.end()) throw ArgumentError("caption for unknown adapter '" + p.adapter_id + "'");
    by_adapter[it->second].push_back(caption_embedding(p, text));
  }
  CaptionBank bank;
  for (auto& [idx, embs] : by_adapter) {
    bank.adapters.push_back(idx);
    bank.embeddings.push_back(std::move(embs));
  }
  return bank;
}

double contrastive_scale(const EncoderParams& p, const RetrieverConfig& cfg) {
  return cfg.learnable_temperature ? std::exp(p.log_scale[0]) : 1.0;
}

double eval_loss(const std::vector<LoRAAdapter>& pool, const CaptionBank& bank, const EncoderParams& params,
                 const RetrieverConfig& cfg) {
  const std::size_t n = bank.adapters.size();
  Tensor E = Tensor::matrix(n, params.config.out_dim), T = Tensor::matrix(n, params.config.out_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor e = encode_lora(pool[bank.adapters[i]], params);
    for (std::size_t c = 0; c < E.cols(); ++c) {
      E(i, c) = e[c];
      T(i, c) = bank.embeddings[i][0][c];
    }
  }
  return contrastive_loss(E, T, contrastive_scale(params, cfg)).loss;
}

}  // namespace

RetrieverResult train_retriever(const std::vector<LoRAAdapter>& pool, const std::vector<CaptionPair>& train_pairs,
                                const std::vector<CaptionPair>& heldout_pairs, const RetrieverConfig& config,
                                std::uint64_t seed) {
  if (train_pairs.empty()) throw ArgumentError("train_retriever: no training captions");
  if (config.text.out_dim != config.encoder.out_dim) {
    throw ArgumentError("train_retriever: text and encoder dimensions differ");
  }
  const CaptionBank bank = make_bank(pool, train_pairs, config.text);
  if (bank.adapters.size() < 2) throw ArgumentError("train_retriever: need captions for at least two adapters");
  for (const CaptionPair& p : heldout_pairs) {
    if (std::none_of(pool.begin(), pool.end(), [&](const LoRAAdapter& a) { return a.adapter_id == p.adapter_id; })) {
      throw ArgumentError("held-out caption for unknown adapter '" + p.adapter_id + "'");
    }
  }
  const std::size_t batch = std::clamp<std::size_t>(config.batch_size, 2, bank.adapters.size());

  RetrieverResult result;
  result.params = init_encoder(catalog_from_adapters(pool), config.encoder, Rng::derive(seed, 1));
  EncoderParams& params = result.params;
  Rng rng(Rng::derive(seed, 2));
  AdamState adam(config.lr);
  std::vector<Tensor*> trainable = params.parameter_list();
  if (!config.learnable_temperature) trainable.pop_back();  // log_scale is last

  const auto record = [&](std::size_t epoch, double train_loss) {
    RetrieverEpoch m;
    m.epoch = epoch;
    m.train_loss = train_loss;
    m.eval_loss = eval_loss(pool, bank, params, config);
    m.heldout_recall_at_1 = heldout_pairs.empty() ? kNaN
                                                  : recall_at_k(build_index(pool, params), heldout_pairs, config.text, 1);
    if (!std::isfinite(m.eval_loss)) throw NumericError("train_retriever: loss diverged");
    result.metrics.push_back(m);
  };
  record(0, kNaN);

  std::vector<std::size_t> order(bank.adapters.size());
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + 2 <= order.size(); start += batch) {
      const std::size_t n = std::min(batch, order.size() - start);
      if (n < 2) break;
      Tensor E = Tensor::matrix(n, params.config.out_dim), T = Tensor::matrix(n, params.config.out_dim);
      std::vector<EncodeCache> caches(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t b = order[start + i];
        const Tensor e = encode_lora(pool[bank.adapters[b]], params, &caches[i]);
        const auto& captions = bank.embeddings[b];
        const Tensor& t = captions[rng.below(captions.size())];
        for (std::size_t c = 0; c < E.cols(); ++c) {
          E(i, c) = e[c];
          T(i, c) = t[c];
        }
      }
      const ContrastiveResult loss = contrastive_loss(E, T, contrastive_scale(params, config));
      EncoderParams grads = params.zeros_like();
      for (std::size_t i = 0; i < n; ++i) {
        Tensor ge({params.config.out_dim}, std::vector<double>(loss.grad_e.row(i).begin(), loss.grad_e.row(i).end()));
        encode_lora_backward(ge, params, caches[i], grads);
      }
      grads.log_scale[0] = loss.grad_log_scale;
      std::vector<Tensor> grad_list;
      for (Tensor* g : grads.parameter_list()) grad_list.push_back(*g);
      if (!config.learnable_temperature) grad_list.pop_back();
      adam_step(trainable, grad_list, adam);
      loss_sum += loss.loss;
      ++batches;
    }
    record(epoch, batches ? loss_sum / static_cast<double>(batches) : kNaN);
  }
  return result;
}

std::string retriever_metrics_jsonl(const std::vector<RetrieverEpoch>& metrics) {
  std::ostringstream out;
  const auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  for (const RetrieverEpoch& m : metrics) {
    out << nlohmann::json{{"epoch", m.epoch},
                          {"train_loss", num(m.train_loss)},
                          {"eval_loss", num(m.eval_loss)},
                          {"heldout_recall_at_1", num(m.heldout_recall_at_1)}}
               .dump()
        << '\n';
  }
  return out.str();
}

}  // namespace autolora
