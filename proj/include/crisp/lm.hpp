#pragma once

#include "crisp/adam.hpp"
#include "crisp/checkpoint.hpp"
#include "crisp/common.hpp"
#include "crisp/corpus.hpp"
#include "crisp/rng.hpp"

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace crisp {

struct LmConfig {
  int vocab_size = 512;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 256;
  int context_len = 128;
  bool tied_unembed = false;
  uint64_t seed = 0;

  void validate() const {
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (n_layers < 2) throw ConfigError("n_layers must be >= 2");
    if (vocab_size <= 0 || d_ff <= 0 || context_len <= 0)
      throw ConfigError("model dimensions must be positive");
  }
  int head_dim() const { return d_model / n_heads; }
};

inline constexpr double kLnEps = 1e-5;

// Pre-LN decoder block. Weights act on row-vector activations: y = x * W.
template <class S>
struct LmLayerT {
  MatT<S> ln1_g, ln1_b;  // [d,1]
  MatT<S> wq, wk, wv, wo;
  MatT<S> ln2_g, ln2_b;
  MatT<S> w1, b1;  // [d,d_ff], [d_ff,1]
  MatT<S> w2, b2;  // [d_ff,d], [d,1]
};

template <class S>
struct LmParamsT {
  LmConfig cfg;
  MatT<S> tok_emb;  // [vocab, d]
  MatT<S> pos_emb;  // [context, d]
  std::vector<LmLayerT<S>> layers;
  MatT<S> lnf_g, lnf_b;
  MatT<S> w_un;  // [d, vocab]; empty when tied

  std::vector<MatT<S>*> tensors() {
    std::vector<MatT<S>*> out{&tok_emb, &pos_emb};
    for (auto& l : layers) {
      for (MatT<S>* m : {&l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_g, &l.ln2_b,
                         &l.w1, &l.b1, &l.w2, &l.b2})
        out.push_back(m);
    }
    out.push_back(&lnf_g);
    out.push_back(&lnf_b);
    if (!cfg.tied_unembed) out.push_back(&w_un);
    return out;
  }
  std::vector<const MatT<S>*> tensors() const {
    return const_cast<LmParamsT*>(this)->tensors_const_helper();
  }
  std::vector<const MatT<S>*> tensors_const_helper() {
    std::vector<const MatT<S>*> out;
    for (auto* m : tensors()) out.push_back(m);
    return out;
  }

  std::vector<std::pair<std::string, MatT<S>*>> named_tensors() {
    std::vector<std::pair<std::string, MatT<S>*>> out;
    out.emplace_back("tok_emb", &tok_emb);
    out.emplace_back("pos_emb", &pos_emb);
    const char* names[] = {"ln1_g", "ln1_b", "wq", "wk", "wv", "wo",
                           "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"};
    for (size_t i = 0; i < layers.size(); ++i) {
      auto& l = layers[i];
      MatT<S>* mats[] = {&l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo,
                         &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2};
      for (int j = 0; j < 12; ++j)
        out.emplace_back("layers." + std::to_string(i) + "." + names[j], mats[j]);
    }
    out.emplace_back("lnf_g", &lnf_g);
    out.emplace_back("lnf_b", &lnf_b);
    if (!cfg.tied_unembed) out.emplace_back("w_un", &w_un);
    return out;
  }
};

template <class S>
LmParamsT<S> zeros_like(const LmParamsT<S>& ref) {
  LmParamsT<S> g = ref;
  for (auto* m : g.tensors()) m->setZero();
  return g;
}

template <class S>
LmParamsT<S> init_lm(const LmConfig& cfg) {
  cfg.validate();
  LmParamsT<S> lm;
  lm.cfg = cfg;
  Rng rng(cfg.seed, "lm.init");
  auto randn = [&](Eigen::Index r, Eigen::Index c, double std) {
    MatT<S> m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
      for (Eigen::Index i = 0; i < r; ++i) m(i, j) = S(rng.normal(0.0, std));
    return m;
  };
  const double w_std = 0.02;
  lm.tok_emb = randn(cfg.vocab_size, cfg.d_model, w_std);
  lm.pos_emb = randn(cfg.context_len, cfg.d_model, w_std);
  lm.layers.resize(size_t(cfg.n_layers));
  for (auto& l : lm.layers) {
    l.ln1_g = MatT<S>::Ones(cfg.d_model, 1);
    l.ln1_b = MatT<S>::Zero(cfg.d_model, 1);
    l.wq = randn(cfg.d_model, cfg.d_model, w_std);
    l.wk = randn(cfg.d_model, cfg.d_model, w_std);
    l.wv = randn(cfg.d_model, cfg.d_model, w_std);
    l.wo = randn(cfg.d_model, cfg.d_model, w_std);
    l.ln2_g = MatT<S>::Ones(cfg.d_model, 1);
    l.ln2_b = MatT<S>::Zero(cfg.d_model, 1);
    l.w1 = randn(cfg.d_model, cfg.d_ff, w_std);
    l.b1 = MatT<S>::Zero(cfg.d_ff, 1);
    l.w2 = randn(cfg.d_ff, cfg.d_model, w_std);
    l.b2 = MatT<S>::Zero(cfg.d_model, 1);
  }
  lm.lnf_g = MatT<S>::Ones(cfg.d_model, 1);
  lm.lnf_b = MatT<S>::Zero(cfg.d_model, 1);
  if (!cfg.tied_unembed) lm.w_un = randn(cfg.d_model, cfg.vocab_size, w_std);
  return lm;
}

// ---------------------------------------------------------------------------
// LoRA
// ---------------------------------------------------------------------------

struct LoraConfig {
  int rank = 8;
  double scale = 1.0;
  std::vector<int> layers;  // layers whose wo and w2 are adapted
  uint64_t seed = 0;
};

template <class S>
struct LoraAdapterT {
  int rank = 0;
  S scale = S(1);
  std::vector<int> layers;
  struct Mats {
    MatT<S> down_attn, up_attn;  // [d,r], [r,d]
    MatT<S> down_mlp, up_mlp;    // [d_ff,r], [r,d]
  };
  std::map<int, Mats> per_layer;

  bool adapts(int layer) const { return per_layer.count(layer) != 0; }

  std::vector<MatT<S>*> tensors() {
    std::vector<MatT<S>*> out;
    for (auto& [l, m] : per_layer) {
      out.push_back(&m.down_attn);
      out.push_back(&m.up_attn);
      out.push_back(&m.down_mlp);
      out.push_back(&m.up_mlp);
    }
    return out;
  }
};

template <class S>
LoraAdapterT<S> init_lora(const LmConfig& cfg, const LoraConfig& lc) {
  for (int l : lc.layers)
    if (l < 0 || l >= cfg.n_layers) throw ConfigError("lora layer out of range");
  if (lc.rank < 1) throw ConfigError("lora rank must be >= 1");
  LoraAdapterT<S> a;
  a.rank = lc.rank;
  a.scale = S(lc.scale);
  a.layers = lc.layers;
  Rng rng(lc.seed, "lora.init");
  auto randn = [&](Eigen::Index r, Eigen::Index c) {
    MatT<S> m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
      for (Eigen::Index i = 0; i < r; ++i) m(i, j) = S(rng.normal(0.0, 0.02));
    return m;
  };
  for (int l : lc.layers) {
    typename LoraAdapterT<S>::Mats m;
    m.down_attn = randn(cfg.d_model, lc.rank);
    m.up_attn = MatT<S>::Zero(lc.rank, cfg.d_model);
    m.down_mlp = randn(cfg.d_ff, lc.rank);
    m.up_mlp = MatT<S>::Zero(lc.rank, cfg.d_model);
    a.per_layer[l] = std::move(m);
  }
  return a;
}

template <class S>
LoraAdapterT<S> zeros_like(const LoraAdapterT<S>& ref) {
  LoraAdapterT<S> g = ref;
  for (auto* m : g.tensors()) m->setZero();
  return g;
}

template <class S>
LmParamsT<S> merge_lora(const LmParamsT<S>& lm, const LoraAdapterT<S>& adapter) {
  LmParamsT<S> merged = lm;
  for (const auto& [l, m] : adapter.per_layer) {
    if (l < 0 || size_t(l) >= merged.layers.size()) throw ConfigError("adapter/model shape mismatch");
    if (m.down_attn.rows() != lm.cfg.d_model || m.down_mlp.rows() != lm.cfg.d_ff)
      throw ConfigError("adapter/model shape mismatch");
    merged.layers[size_t(l)].wo += adapter.scale * m.down_attn * m.up_attn;
    merged.layers[size_t(l)].w2 += adapter.scale * m.down_mlp * m.up_mlp;
  }
  return merged;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

template <class S>
struct ActivationRecordT {
  std::vector<int> positions;      // absolute token positions captured
  std::map<int, MatT<S>> layers;   // layer -> [n_captured, d_model]
};

template <class S>
struct LayerCacheT {
  MatT<S> xhat1, y1;
  VecT<S> inv1;
  MatT<S> q, k, v, z;
  std::vector<MatT<S>> p;  // per head [T,T]
  MatT<S> x_mid;
  MatT<S> xhat2, y2;
  VecT<S> inv2;
  MatT<S> h_pre;
  MatT<S> wo_eff, w2_eff;  // populated when the adapter touches this layer
};

template <class S>
struct ForwardCacheT {
  Tokens tokens;
  std::vector<LayerCacheT<S>> layers;
  MatT<S> xhatf, ynf;
  VecT<S> invf;
  MatT<S> logits;
  std::vector<int> capture_positions;
  std::vector<int> capture_layers;
};

namespace detail {

// Row-wise layer norm; fills xhat, inv and returns g/b-scaled output.
template <class S>
MatT<S> layer_norm(const MatT<S>& x, const MatT<S>& g, const MatT<S>& b, MatT<S>& xhat,
                   VecT<S>& inv) {
  const Eigen::Index t_len = x.rows(), d = x.cols();
  xhat.resize(t_len, d);
  inv.resize(t_len);
  MatT<S> out(t_len, d);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    const S mu = x.row(t).mean();
    const auto centered = (x.row(t).array() - mu);
    const S var = centered.square().mean();
    const S iv = S(1) / std::sqrt(var + S(kLnEps));
    inv(t) = iv;
    xhat.row(t) = (centered * iv).matrix();
    out.row(t) = (xhat.row(t).array() * g.col(0).transpose().array() +
                  b.col(0).transpose().array())
                     .matrix();
  }
  return out;
}

template <class S>
MatT<S> layer_norm_backward(const MatT<S>& dy, const MatT<S>& xhat, const VecT<S>& inv,
                            const MatT<S>& g, MatT<S>* dg, MatT<S>* db) {
  const Eigen::Index t_len = dy.rows(), d = dy.cols();
  if (dg) {
    dg->col(0).noalias() += (dy.array() * xhat.array()).colwise().sum().matrix().transpose();
    db->col(0).noalias() += dy.colwise().sum().transpose();
  }
  MatT<S> dx(t_len, d);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    const auto dxhat = (dy.row(t).array() * g.col(0).transpose().array());
    const S m1 = dxhat.mean();
    const S m2 = (dxhat * xhat.row(t).array()).mean();
    dx.row(t) = (inv(t) * (dxhat - m1 - xhat.row(t).array() * m2)).matrix();
  }
  return dx;
}

template <class S>
void softmax_rows_causal(MatT<S>& s) {
  // Row i attends to columns 0..i.
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    auto row = s.row(i).head(i + 1);
    const S mx = row.maxCoeff();
    row = (row.array() - mx).exp().matrix();
    row /= row.sum();
    if (i + 1 < s.cols()) s.row(i).tail(s.cols() - i - 1).setZero();
  }
}

}  // namespace detail

template <class S>
MatT<S> lm_forward(const LmParamsT<S>& lm, const LoraAdapterT<S>* adapter, const Tokens& tokens,
                   const std::vector<int>& capture_layers = {},
                   ActivationRecordT<S>* record = nullptr, ForwardCacheT<S>* cache = nullptr,
                   bool want_logits = true) {
  const auto& cfg = lm.cfg;
  if (tokens.empty()) throw InputError("empty token sequence");
  if (Eigen::Index(tokens.size()) > cfg.context_len) throw InputError("sequence exceeds context_len");
  for (TokenId t : tokens)
    if (t < 0 || t >= cfg.vocab_size) throw InputError("token id out of range");
  for (int l : capture_layers)
    if (l < 0 || l >= cfg.n_layers) throw InputError("capture layer out of range");

  const Eigen::Index t_len = Eigen::Index(tokens.size());
  const int nh = cfg.n_heads, dk = cfg.head_dim();
  const S inv_sqrt_dk = S(1) / std::sqrt(S(dk));

  std::vector<int> cap_pos;
  for (int t = 0; t < int(t_len); ++t)
    if (!is_special_token(tokens[size_t(t)])) cap_pos.push_back(t);

  if (cache) {
    cache->tokens = tokens;
    cache->layers.assign(size_t(cfg.n_layers), {});
    cache->capture_positions = cap_pos;
    cache->capture_layers = capture_layers;
  }
  if (record) {
    record->positions = cap_pos;
    record->layers.clear();
  }

  MatT<S> x(t_len, cfg.d_model);
  for (Eigen::Index t = 0; t < t_len; ++t)
    x.row(t) = lm.tok_emb.row(tokens[size_t(t)]) + lm.pos_emb.row(t);

  LayerCacheT<S> local;
  for (int li = 0; li < cfg.n_layers; ++li) {
    const auto& L = lm.layers[size_t(li)];
    LayerCacheT<S>& lc = cache ? cache->layers[size_t(li)] : local;
    const bool adapted = adapter && adapter->adapts(li);
    const MatT<S>* wo = &L.wo;
    const MatT<S>* w2 = &L.w2;
    if (adapted) {
      const auto& m = adapter->per_layer.at(li);
      lc.wo_eff = L.wo + adapter->scale * m.down_attn * m.up_attn;
      lc.w2_eff = L.w2 + adapter->scale * m.down_mlp * m.up_mlp;
      wo = &lc.wo_eff;
      w2 = &lc.w2_eff;
    }

    lc.y1 = detail::layer_norm(x, L.ln1_g, L.ln1_b, lc.xhat1, lc.inv1);
    lc.q.noalias() = lc.y1 * L.wq;
    lc.k.noalias() = lc.y1 * L.wk;
    lc.v.noalias() = lc.y1 * L.wv;
    lc.z.resize(t_len, cfg.d_model);
    lc.p.assign(size_t(nh), {});
    for (int h = 0; h < nh; ++h) {
      auto qh = lc.q.middleCols(h * dk, dk);
      auto kh = lc.k.middleCols(h * dk, dk);
      auto vh = lc.v.middleCols(h * dk, dk);
      MatT<S>& p = lc.p[size_t(h)];
      p.noalias() = qh * kh.transpose() * inv_sqrt_dk;
      detail::softmax_rows_causal(p);
      lc.z.middleCols(h * dk, dk).noalias() = p * vh;
    }
    lc.x_mid = x + lc.z * (*wo);

    lc.y2 = detail::layer_norm(lc.x_mid, L.ln2_g, L.ln2_b, lc.xhat2, lc.inv2);
    lc.h_pre.noalias() = lc.y2 * L.w1;
    lc.h_pre.rowwise() += L.b1.col(0).transpose();
    MatT<S> h_act = lc.h_pre.cwiseMax(S(0));
    x = lc.x_mid + h_act * (*w2);
    x.rowwise() += L.b2.col(0).transpose();

    if (record && std::find(capture_layers.begin(), capture_layers.end(), li) !=
                      capture_layers.end()) {
      MatT<S> rows(Eigen::Index(cap_pos.size()), cfg.d_model);
      for (size_t r = 0; r < cap_pos.size(); ++r) rows.row(Eigen::Index(r)) = x.row(cap_pos[r]);
      record->layers[li] = std::move(rows);
    }
    if (!cache) local = {};
  }

  MatT<S> logits;
  if (want_logits || cache) {
    MatT<S> xhatf_local, ynf_local;
    VecT<S> invf_local;
    MatT<S>& xhatf = cache ? cache->xhatf : xhatf_local;
    VecT<S>& invf = cache ? cache->invf : invf_local;
    MatT<S>& ynf = cache ? cache->ynf : ynf_local;
    ynf = detail::layer_norm(x, lm.lnf_g, lm.lnf_b, xhatf, invf);
    if (cfg.tied_unembed)
      logits.noalias() = ynf * lm.tok_emb.transpose();
    else
      logits.noalias() = ynf * lm.w_un;
    if (cache) cache->logits = logits;
  }
  return logits;
}

// Backward pass. d_logits may be empty; resid_grads maps a layer index to a
// gradient matrix shaped like the captured rows of that layer (see
// cache.capture_positions). Gradients accumulate into lm_grads/lora_grads.
template <class S>
void lm_backward(const LmParamsT<S>& lm, const LoraAdapterT<S>* adapter,
                 const ForwardCacheT<S>& cache, const MatT<S>& d_logits,
                 const std::map<int, MatT<S>>& resid_grads, LmParamsT<S>* lm_grads,
                 LoraAdapterT<S>* lora_grads) {
  const auto& cfg = lm.cfg;
  const Eigen::Index t_len = Eigen::Index(cache.tokens.size());
  const int nh = cfg.n_heads, dk = cfg.head_dim();
  const S inv_sqrt_dk = S(1) / std::sqrt(S(dk));

  MatT<S> dx = MatT<S>::Zero(t_len, cfg.d_model);
  if (d_logits.size() > 0) {
    MatT<S> dynf;
    if (cfg.tied_unembed) {
      dynf.noalias() = d_logits * lm.tok_emb;
      if (lm_grads) lm_grads->tok_emb.noalias() += d_logits.transpose() * cache.ynf;
    } else {
      dynf.noalias() = d_logits * lm.w_un.transpose();
      if (lm_grads) lm_grads->w_un.noalias() += cache.ynf.transpose() * d_logits;
    }
    dx = detail::layer_norm_backward(dynf, cache.xhatf, cache.invf, lm.lnf_g,
                                     lm_grads ? &lm_grads->lnf_g : nullptr,
                                     lm_grads ? &lm_grads->lnf_b : nullptr);
  }

  auto scatter_injection = [&](int layer, MatT<S>& into) {
    auto it = resid_grads.find(layer);
    if (it == resid_grads.end()) return;
    const MatT<S>& g = it->second;
    if (g.rows() != Eigen::Index(cache.capture_positions.size()))
      throw InputError("residual gradient row count mismatch");
    for (size_t r = 0; r < cache.capture_positions.size(); ++r)
      into.row(cache.capture_positions[r]) += g.row(Eigen::Index(r));
  };

  for (int li = cfg.n_layers - 1; li >= 0; --li) {
    const auto& L = lm.layers[size_t(li)];
    const auto& lc = cache.layers[size_t(li)];
    const bool adapted = adapter && adapter->adapts(li);
    const MatT<S>* wo = adapted ? &lc.wo_eff : &L.wo;
    const MatT<S>* w2 = adapted ? &lc.w2_eff : &L.w2;

    scatter_injection(li, dx);  // gradient w.r.t. this layer's residual output

    // MLP
    const MatT<S>& dm = dx;
    MatT<S> h_act = lc.h_pre.cwiseMax(S(0));
    MatT<S> dh_act;
    dh_act.noalias() = dm * w2->transpose();
    MatT<S> dw2_eff;
    if (lm_grads || lora_grads) dw2_eff.noalias() = h_act.transpose() * dm;
    if (lm_grads) {
      lm_grads->layers[size_t(li)].w2 += dw2_eff;
      lm_grads->layers[size_t(li)].b2.col(0) += dm.colwise().sum().transpose();
    }
    if (lora_grads && adapted) {
      const auto& m = adapter->per_layer.at(li);
      auto& gm = lora_grads->per_layer.at(li);
      gm.down_mlp.noalias() += adapter->scale * dw2_eff * m.up_mlp.transpose();
      gm.up_mlp.noalias() += adapter->scale * m.down_mlp.transpose() * dw2_eff;
    }
    MatT<S> dh_pre = (dh_act.array() * (lc.h_pre.array() > S(0)).template cast<S>()).matrix();
    MatT<S> dy2;
    dy2.noalias() = dh_pre * L.w1.transpose();
    if (lm_grads) {
      lm_grads->layers[size_t(li)].w1.noalias() += lc.y2.transpose() * dh_pre;
      lm_grads->layers[size_t(li)].b1.col(0) += dh_pre.colwise().sum().transpose();
    }
    MatT<S> dx_mid =
        dx + detail::layer_norm_backward(dy2, lc.xhat2, lc.inv2, L.ln2_g,
                                         lm_grads ? &lm_grads->layers[size_t(li)].ln2_g : nullptr,
                                         lm_grads ? &lm_grads->layers[size_t(li)].ln2_b : nullptr);

    // Attention
    MatT<S> dz;
    dz.noalias() = dx_mid * wo->transpose();
    MatT<S> dwo_eff;
    if (lm_grads || lora_grads) dwo_eff.noalias() = lc.z.transpose() * dx_mid;
    if (lm_grads) lm_grads->layers[size_t(li)].wo += dwo_eff;
    if (lora_grads && adapted) {
      const auto& m = adapter->per_layer.at(li);
      auto& gm = lora_grads->per_layer.at(li);
      gm.down_attn.noalias() += adapter->scale * dwo_eff * m.up_attn.transpose();
      gm.up_attn.noalias() += adapter->scale * m.down_attn.transpose() * dwo_eff;
    }

    MatT<S> dq = MatT<S>::Zero(t_len, cfg.d_model);
    MatT<S> dkm = MatT<S>::Zero(t_len, cfg.d_model);
    MatT<S> dv = MatT<S>::Zero(t_len, cfg.d_model);
    for (int h = 0; h < nh; ++h) {
      const MatT<S>& p = lc.p[size_t(h)];
      auto kh = lc.k.middleCols(h * dk, dk);
      auto qh = lc.q.middleCols(h * dk, dk);
      auto vh = lc.v.middleCols(h * dk, dk);
      auto dzh = dz.middleCols(h * dk, dk);
      MatT<S> dp;
      dp.noalias() = dzh * vh.transpose();
      dv.middleCols(h * dk, dk).noalias() = p.transpose() * dzh;
      // softmax backward, masked entries have p == 0
      MatT<S> ds(t_len, t_len);
      for (Eigen::Index i = 0; i < t_len; ++i) {
        const S dot = (dp.row(i).array() * p.row(i).array()).sum();
        ds.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
      }
      dq.middleCols(h * dk, dk).noalias() = ds * kh * inv_sqrt_dk;
      dkm.middleCols(h * dk, dk).noalias() = ds.transpose() * qh * inv_sqrt_dk;
    }
    MatT<S> dy1;
    dy1.noalias() = dq * L.wq.transpose();
    dy1.noalias() += dkm * L.wk.transpose();
    dy1.noalias() += dv * L.wv.transpose();
    if (lm_grads) {
      auto& gl = lm_grads->layers[size_t(li)];
      gl.wq.noalias() += lc.y1.transpose() * dq;
      gl.wk.noalias() += lc.y1.transpose() * dkm;
      gl.wv.noalias() += lc.y1.transpose() * dv;
    }
    dx = dx_mid + detail::layer_norm_backward(
                      dy1, lc.xhat1, lc.inv1, L.ln1_g,
                      lm_grads ? &lm_grads->layers[size_t(li)].ln1_g : nullptr,
                      lm_grads ? &lm_grads->layers[size_t(li)].ln1_b : nullptr);
  }

  if (lm_grads) {
    for (Eigen::Index t = 0; t < t_len; ++t) {
      lm_grads->tok_emb.row(cache.tokens[size_t(t)]) += dx.row(t);
      lm_grads->pos_emb.row(t) += dx.row(t);
    }
  }
}

// ---------------------------------------------------------------------------
// Losses, training, inference
// ---------------------------------------------------------------------------

// Mean next-token cross entropy over positions 0..T-2; optionally produces
// d loss / d logits (scaled by weight).
template <class S>
double cross_entropy(const MatT<S>& logits, const Tokens& tokens, MatT<S>* d_logits = nullptr,
                     double weight = 1.0) {
  const Eigen::Index t_len = logits.rows();
  const Eigen::Index n_pred = t_len - 1;
  if (n_pred <= 0) throw InputError("need at least two tokens for next-token loss");
  if (d_logits) *d_logits = MatT<S>::Zero(t_len, logits.cols());
  double total = 0.0;
  for (Eigen::Index t = 0; t < n_pred; ++t) {
    const TokenId target = tokens[size_t(t + 1)];
    const S mx = logits.row(t).maxCoeff();
    VecT<S> p = (logits.row(t).array() - mx).exp().matrix().transpose();
    const S z = p.sum();
    p /= z;
    total += -std::log(double(p(target)) + 1e-300);
    if (d_logits) {
      d_logits->row(t) = (p * S(weight / double(n_pred))).transpose();
      (*d_logits)(t, target) -= S(weight / double(n_pred));
    }
  }
  return total / double(n_pred);
}

struct LmTrainConfig {
  long steps = 1200;
  int batch_docs = 8;
  double lr = 1e-3;
  uint64_t seed = 0;
};

template <class S>
std::vector<double> train_lm(LmParamsT<S>& lm, const std::vector<TokenizedDoc>& docs,
                             const LmTrainConfig& cfg) {
  if (docs.empty()) throw ConfigError("empty training corpus");
  std::vector<double> losses;
  if (cfg.steps == 0) return losses;
  Rng rng(cfg.seed, "lm.train");
  AdamT<S> opt(cfg.lr);
  auto params = lm.tensors();
  LmParamsT<S> grads = zeros_like(lm);
  for (long step = 0; step < cfg.steps; ++step) {
    for (auto* g : grads.tensors()) g->setZero();
    double loss = 0.0;
    for (int b = 0; b < cfg.batch_docs; ++b) {
      const auto& doc = docs[size_t(rng.randint(0, int64_t(docs.size()) - 1))];
      ForwardCacheT<S> cache;
      MatT<S> logits = lm_forward<S>(lm, nullptr, doc.tokens, {}, nullptr, &cache);
      MatT<S> dlogits;
      loss += cross_entropy(logits, doc.tokens, &dlogits, 1.0 / cfg.batch_docs);
      lm_backward<S>(lm, nullptr, cache, dlogits, {}, &grads, nullptr);
    }
    loss /= cfg.batch_docs;
    if (!std::isfinite(loss)) throw TrainError("training loss diverged", step);
    losses.push_back(loss);
    std::vector<const MatT<S>*> cg;
    for (auto* g : grads.tensors()) cg.push_back(g);
    opt.step(params, cg);
  }
  return losses;
}

template <class S>
double perplexity(const LmParamsT<S>& lm, const LoraAdapterT<S>* adapter,
                  const std::vector<TokenizedDoc>& docs) {
  if (docs.empty()) throw ConfigError("empty corpus");
  double total_nll = 0.0;
  long total_pred = 0;
  for (const auto& doc : docs) {
    MatT<S> logits = lm_forward<S>(lm, adapter, doc.tokens);
    const Eigen::Index n_pred = logits.rows() - 1;
    total_nll += cross_entropy(logits, doc.tokens) * double(n_pred);
    total_pred += n_pred;
  }
  return std::exp(total_nll / double(total_pred));
}

template <class S>
Tokens generate(const LmParamsT<S>& lm, const LoraAdapterT<S>* adapter, const Tokens& prefix,
                int n) {
  if (n < 1) throw InputError("generation length must be >= 1");
  Tokens out = prefix;
  for (int i = 0; i < n; ++i) {
    Tokens window = out;
    if (Eigen::Index(window.size()) > lm.cfg.context_len)
      window = Tokens(window.end() - lm.cfg.context_len, window.end());
    MatT<S> logits = lm_forward<S>(lm, adapter, window);
    Eigen::Index best;
    logits.row(logits.rows() - 1).maxCoeff(&best);
    out.push_back(TokenId(best));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint glue
// ---------------------------------------------------------------------------

inline nlohmann::json lm_config_json(const LmConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},       {"context_len", c.context_len},
          {"tied_unembed", c.tied_unembed}, {"seed", c.seed}};
}

inline LmConfig lm_config_from_json(const nlohmann::json& j) {
  LmConfig c;
  c.vocab_size = j.at("vocab_size");
  c.d_model = j.at("d_model");
  c.n_layers = j.at("n_layers");
  c.n_heads = j.at("n_heads");
  c.d_ff = j.at("d_ff");
  c.context_len = j.at("context_len");
  c.tied_unembed = j.at("tied_unembed");
  c.seed = j.at("seed");
  return c;
}

template <class S>
void save_lm(const std::string& path, const LmParamsT<S>& lm) {
  TensorContainer c;
  c.meta = {{"tool_version", kToolVersion}, {"config", lm_config_json(lm.cfg)}};
  auto& mut = const_cast<LmParamsT<S>&>(lm);
  for (auto& [name, t] : mut.named_tensors()) c.add(name, to_f32<S>(*t));
  save_container(path, "CRLM", c);
}

template <class S>
LmParamsT<S> load_lm(const std::string& path) {
  auto c = load_container(path, "CRLM");
  LmConfig cfg = lm_config_from_json(c.meta.at("config"));
  LmParamsT<S> lm = init_lm<S>(cfg);
  for (auto& [name, t] : lm.named_tensors()) *t = from_f32<S>(c.get(name));
  return lm;
}

template <class S>
void save_adapter(const std::string& path, const LoraAdapterT<S>& a) {
  TensorContainer c;
  c.meta = {{"tool_version", kToolVersion},
            {"rank", a.rank},
            {"scale", double(a.scale)},
            {"layers", a.layers}};
  for (const auto& [l, m] : a.per_layer) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    c.add(prefix + "down_attn", to_f32<S>(m.down_attn));
    c.add(prefix + "up_attn", to_f32<S>(m.up_attn));
    c.add(prefix + "down_mlp", to_f32<S>(m.down_mlp));
    c.add(prefix + "up_mlp", to_f32<S>(m.up_mlp));
  }
  save_container(path, "CRLA", c);
}

template <class S>
LoraAdapterT<S> load_adapter(const std::string& path) {
  auto c = load_container(path, "CRLA");
  LoraAdapterT<S> a;
  a.rank = c.meta.at("rank");
  a.scale = S(c.meta.at("scale").get<double>());
  a.layers = c.meta.at("layers").get<std::vector<int>>();
  for (int l : a.layers) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    typename LoraAdapterT<S>::Mats m;
    m.down_attn = from_f32<S>(c.get(prefix + "down_attn"));
    m.up_attn = from_f32<S>(c.get(prefix + "up_attn"));
    m.down_mlp = from_f32<S>(c.get(prefix + "down_mlp"));
    m.up_mlp = from_f32<S>(c.get(prefix + "up_mlp"));
    a.per_layer[l] = std::move(m);
  }
  return a;
}

using LmParams = LmParamsT<real>;
using LoraAdapter = LoraAdapterT<real>;
using ActivationRecord = ActivationRecordT<real>;
using ForwardCache = ForwardCacheT<real>;

}  // namespace crisp
