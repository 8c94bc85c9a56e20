#pragma once

#include "crisp/common.hpp"
#include "crisp/corpus.hpp"
#include "crisp/lm.hpp"
#include "crisp/sae.hpp"
#include "crisp/selection.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

namespace crisp {

struct LossWeights {
  double alpha = 0.01;
  double beta = 0.99;
  double gamma = 0.01;
  double lambda_mean = 30.0;

  LossWeights() = default;
  LossWeights(double beta_, double gamma_, double lambda_)
      : alpha(1.0 - beta_), beta(beta_), gamma(gamma_), lambda_mean(lambda_) {
    if (alpha < 0 || beta < 0 || gamma < 0 || lambda_mean < 0)
      throw ConfigError("loss weights must be non-negative (and beta <= 1)");
  }
};

struct UnlearnConfig {
  std::vector<int> sae_layers{2, 3};
  std::vector<int> opt_layers{0, 1};
  SalientSet salient;
  LossWeights weights;
  int lora_rank = 8;
  double lora_scale = 1.0;
  double learning_rate = 2e-3;
  long steps = 500;
  int batch_docs = 8;
  uint64_t seed = 0;

  void validate(int n_layers) const {
    if (sae_layers.empty() || opt_layers.empty()) throw ConfigError("empty layer sets");
    const int max_sae = *std::max_element(sae_layers.begin(), sae_layers.end());
    for (int l : opt_layers) {
      if (l < 0 || l >= n_layers) throw ConfigError("opt layer out of range");
      if (l >= max_sae) throw ConfigError("opt layers must precede max sae layer");
    }
    for (int l : sae_layers) {
      if (l < 0 || l >= n_layers) throw ConfigError("sae layer out of range");
      if (!salient.layers.count(l)) throw ConfigError("salient set missing a sae layer");
    }
    if (salient.layers.size() != sae_layers.size())
      throw ConfigError("salient set must cover exactly the sae layers");
  }
};

// Mean over target tokens and salient features of a_i + lambda * c_t, where
// c_t is the mean activation over all features at token t; averaged across
// the suppression layers. Optionally produces gradients w.r.t. the captured
// residuals, per document and layer.
template <class S>
double unlearn_loss(const std::map<int, SaeParamsT<S>>& saes, const SalientSet& salient,
                    const std::vector<ActivationRecordT<S>>& acts, double lambda,
                    std::vector<std::map<int, MatT<S>>>* dh = nullptr,
                    bool* empty_layer_warning = nullptr) {
  if (acts.empty()) throw InputError("no activation records");
  const std::vector<int> layers = [&] {
    std::vector<int> out;
    for (const auto& [l, f] : salient.layers) out.push_back(l);
    return out;
  }();
  if (layers.empty()) throw ConfigError("salient set is empty");
  long n_tokens = 0;
  for (const auto& rec : acts) n_tokens += long(rec.positions.size());
  if (n_tokens == 0) throw InputError("no non-special tokens in batch");

  if (dh) dh->assign(acts.size(), {});
  double total = 0.0;
  for (int layer : layers) {
    auto sit = saes.find(layer);
    if (sit == saes.end()) throw ConfigError("missing SAE for layer");
    const auto& sae = sit->second;
    const auto& feats = salient.layers.at(layer);
    if (feats.empty()) {
      if (empty_layer_warning) *empty_layer_warning = true;
      continue;
    }
    const double w_sal = 1.0 / (double(feats.size()) * double(n_tokens) * double(layers.size()));
    const double w_mean =
        lambda / (double(sae.d_sae()) * double(n_tokens) * double(layers.size()));
    for (size_t d = 0; d < acts.size(); ++d) {
      auto hit = acts[d].layers.find(layer);
      if (hit == acts[d].layers.end()) throw InputError("record missing sae layer");
      const MatT<S>& h = hit->second;
      MatT<S> a = sae_encode(sae, h);
      double layer_sum = 0.0;
      for (int f : feats) layer_sum += double(a.col(f).sum());
      total += layer_sum * w_sal;
      total += double(a.sum()) * w_mean;
      if (dh) {
        MatT<S> da = MatT<S>::Constant(a.rows(), a.cols(), S(w_mean));
        for (int f : feats) da.col(f).array() += S(w_sal);
        MatT<S> grad = sae_encode_backward_h(sae, h, da);
        auto& slot = (*dh)[d][layer];
        if (slot.size() == 0)
          slot = std::move(grad);
        else
          slot += grad;
      }
    }
  }
  return total;
}

// Mean over tokens, layers and residual dimensions of the squared distance
// between current and reference residuals. Used for both the retention and
// coherence terms. Per-dimension averaging keeps this term on the same scale
// as the per-feature unlearning term regardless of d_model.
template <class S>
double residual_match_loss(const std::vector<ActivationRecordT<S>>& cur,
                           const std::vector<ActivationRecordT<S>>& ref,
                           const std::vector<int>& layers,
                           std::vector<std::map<int, MatT<S>>>* dh = nullptr) {
  if (cur.size() != ref.size()) throw InputError("record count mismatch");
  if (layers.empty()) throw ConfigError("empty layer set");
  long n_tokens = 0;
  Eigen::Index d_model = 0;
  for (const auto& rec : cur) {
    n_tokens += long(rec.positions.size());
    for (const auto& [l, h] : rec.layers) d_model = h.cols();
  }
  if (n_tokens == 0) throw InputError("no non-special tokens in batch");
  if (dh) dh->assign(cur.size(), {});
  const double norm = 1.0 / (double(n_tokens) * double(layers.size()) * double(d_model));
  double total = 0.0;
  for (int layer : layers) {
    for (size_t d = 0; d < cur.size(); ++d) {
      const MatT<S>& h = cur[d].layers.at(layer);
      const MatT<S>& h0 = ref[d].layers.at(layer);
      if (h.rows() != h0.rows()) throw InputError("record row mismatch");
      MatT<S> diff = h - h0;
      total += double(diff.squaredNorm()) * norm;
      if (dh) (*dh)[d][layer] = (S(2) * S(norm)) * diff;
    }
  }
  return total;
}

struct LossComponents {
  double unlearn = 0.0, retain = 0.0, coherence = 0.0;
};

inline double total_loss(const LossComponents& c, const LossWeights& w) {
  return w.alpha * c.unlearn + w.beta * c.retain + w.gamma * c.coherence;
}

struct StepLog {
  long step = 0;
  double l_unlearn = 0.0, l_retain = 0.0, l_coherence = 0.0, total = 0.0;
};

namespace detail {

template <class S>
void scale_injections(std::vector<std::map<int, MatT<S>>>& inj, double w) {
  for (auto& per_doc : inj)
    for (auto& [l, m] : per_doc) m *= S(w);
}

}  // namespace detail

// CRISP fine-tuning: only the adapter trains; the frozen model and the SAEs
// are read-only throughout.
template <class S>
struct CrispRunResultT {
  LoraAdapterT<S> adapter;
  std::vector<StepLog> log;
  bool empty_layer_warning = false;
};

using CrispRunResult = CrispRunResultT<real>;

template <class S>
CrispRunResultT<S> train_crisp(const LmParamsT<S>& lm_frozen,
                               const std::map<int, SaeParamsT<S>>& saes, const UnlearnConfig& cfg,
                               const Corpora& corpora) {
  cfg.validate(lm_frozen.cfg.n_layers);
  if (corpora.target.empty() || corpora.retain.empty() || corpora.coherence.empty())
    throw ConfigError("all three corpora must be non-empty");
  bool any_salient = false;
  for (const auto& [l, f] : cfg.salient.layers) any_salient |= !f.empty();
  if (!any_salient) throw ConfigError("salient set empty on all layers");

  const int final_layer = lm_frozen.cfg.n_layers - 1;
  LoraConfig lc;
  lc.rank = cfg.lora_rank;
  lc.scale = cfg.lora_scale;
  lc.layers = cfg.opt_layers;
  lc.seed = cfg.seed;
  CrispRunResultT<S> result;
  result.adapter = init_lora<S>(lm_frozen.cfg, lc);
  if (cfg.steps == 0) {
    for (auto& [l, m] : result.adapter.per_layer) {
      m.up_attn.setZero();
      m.up_mlp.setZero();
    }
    return result;
  }

  Rng rng(cfg.seed, "crisp.batches");
  AdamT<S> opt(cfg.learning_rate);
  auto params = result.adapter.tensors();
  LoraAdapterT<S> grads = zeros_like(result.adapter);

  // Frozen residuals on retain/coherence documents never change; compute on
  // first use and reuse across steps.
  std::map<size_t, ActivationRecordT<S>> frozen_retain, frozen_coh;
  auto frozen_record = [&](std::map<size_t, ActivationRecordT<S>>& cache, size_t idx,
                           const TokenizedDoc& doc,
                           const std::vector<int>& layers) -> const ActivationRecordT<S>& {
    auto it = cache.find(idx);
    if (it == cache.end()) {
      ActivationRecordT<S> rec;
      lm_forward<S>(lm_frozen, nullptr, doc.tokens, layers, &rec, nullptr, false);
      it = cache.emplace(idx, std::move(rec)).first;
    }
    return it->second;
  };

  for (long step = 0; step < cfg.steps; ++step) {
    for (auto* g : grads.tensors()) g->setZero();
    LossComponents comps;

    // unlearning term on target batch
    {
      std::vector<ForwardCacheT<S>> caches(size_t(cfg.batch_docs));
      std::vector<ActivationRecordT<S>> recs(size_t(cfg.batch_docs));
      for (int b = 0; b < cfg.batch_docs; ++b) {
        const auto& doc =
            corpora.target[size_t(rng.randint(0, int64_t(corpora.target.size()) - 1))];
        lm_forward<S>(lm_frozen, &result.adapter, doc.tokens, cfg.sae_layers, &recs[size_t(b)],
                      &caches[size_t(b)], false);
      }
      std::vector<std::map<int, MatT<S>>> inj;
      comps.unlearn = unlearn_loss<S>(saes, cfg.salient, recs, cfg.weights.lambda_mean, &inj,
                                      &result.empty_layer_warning);
      detail::scale_injections(inj, cfg.weights.alpha);
      for (int b = 0; b < cfg.batch_docs; ++b)
        lm_backward<S>(lm_frozen, &result.adapter, caches[size_t(b)], {}, inj[size_t(b)], nullptr,
                       &grads);
    }

    // retention term
    {
      std::vector<ForwardCacheT<S>> caches(size_t(cfg.batch_docs));
      std::vector<ActivationRecordT<S>> recs(size_t(cfg.batch_docs));
      std::vector<ActivationRecordT<S>> refs(size_t(cfg.batch_docs));
      for (int b = 0; b < cfg.batch_docs; ++b) {
        const size_t idx = size_t(rng.randint(0, int64_t(corpora.retain.size()) - 1));
        const auto& doc = corpora.retain[idx];
        refs[size_t(b)] = frozen_record(frozen_retain, idx, doc, cfg.sae_layers);
        lm_forward<S>(lm_frozen, &result.adapter, doc.tokens, cfg.sae_layers, &recs[size_t(b)],
                      &caches[size_t(b)], false);
      }
      std::vector<std::map<int, MatT<S>>> inj;
      comps.retain = residual_match_loss<S>(recs, refs, cfg.sae_layers, &inj);
      detail::scale_injections(inj, cfg.weights.beta);
      for (int b = 0; b < cfg.batch_docs; ++b)
        lm_backward<S>(lm_frozen, &result.adapter, caches[size_t(b)], {}, inj[size_t(b)], nullptr,
                       &grads);
    }

    // coherence term, final-layer representation only
    {
      const std::vector<int> fl{final_layer};
      std::vector<ForwardCacheT<S>> caches(size_t(cfg.batch_docs));
      std::vector<ActivationRecordT<S>> recs(size_t(cfg.batch_docs));
      std::vector<ActivationRecordT<S>> refs(size_t(cfg.batch_docs));
      for (int b = 0; b < cfg.batch_docs; ++b) {
        const size_t idx = size_t(rng.randint(0, int64_t(corpora.coherence.size()) - 1));
        const auto& doc = corpora.coherence[idx];
        refs[size_t(b)] = frozen_record(frozen_coh, idx, doc, fl);
        lm_forward<S>(lm_frozen, &result.adapter, doc.tokens, fl, &recs[size_t(b)],
                      &caches[size_t(b)], false);
      }
      std::vector<std::map<int, MatT<S>>> inj;
      comps.coherence = residual_match_loss<S>(recs, refs, fl, &inj);
      detail::scale_injections(inj, cfg.weights.gamma);
      for (int b = 0; b < cfg.batch_docs; ++b)
        lm_backward<S>(lm_frozen, &result.adapter, caches[size_t(b)], {}, inj[size_t(b)], nullptr,
                       &grads);
    }

    const double tot = total_loss(comps, cfg.weights);
    if (!std::isfinite(tot)) throw TrainError("crisp loss diverged", step);
    result.log.push_back({step, comps.unlearn, comps.retain, comps.coherence, tot});

    std::vector<const MatT<S>*> cg;
    for (auto* g : grads.tensors()) cg.push_back(g);
    opt.step(params, cg);
  }
  return result;
}

// ---------------------------------------------------------------------------
// RMU baseline: push target-document residuals toward a fixed random
// direction while regularizing retain-document residuals; trains the full
// parameters of the edited layers.
// ---------------------------------------------------------------------------

struct RmuConfig {
  double steer_coeff = 20.0;
  double alpha_rmu = 100.0;
  std::vector<int> act_layers{1};
  std::vector<int> train_layers{0, 1};
  double learning_rate = 1e-3;
  long steps = 300;
  int batch_docs = 8;
  uint64_t seed = 0;
};

template <class S>
VecT<S> rmu_direction(int d_model, uint64_t seed) {
  Rng rng(seed, "rmu.direction");
  VecT<S> u(d_model);
  for (int i = 0; i < d_model; ++i) u(i) = S(rng.normal());
  u.normalize();
  return u;
}

template <class S>
LmParamsT<S> train_rmu(const LmParamsT<S>& lm_frozen, const RmuConfig& cfg,
                       const Corpora& corpora) {
  for (int l : cfg.act_layers)
    if (l < 0 || l >= lm_frozen.cfg.n_layers) throw ConfigError("rmu act layer out of range");
  for (int l : cfg.train_layers)
    if (l < 0 || l >= lm_frozen.cfg.n_layers) throw ConfigError("rmu train layer out of range");

  LmParamsT<S> lm = lm_frozen;
  const VecT<S> dir = rmu_direction<S>(lm.cfg.d_model, cfg.seed);
  const VecT<S> target_vec = S(cfg.steer_coeff) * dir;

  std::vector<MatT<S>*> params;
  for (int l : cfg.train_layers) {
    auto& L = lm.layers[size_t(l)];
    for (MatT<S>* m : {&L.wq, &L.wk, &L.wv, &L.wo, &L.w1, &L.b1, &L.w2, &L.b2})
      params.push_back(m);
  }
  Rng rng(cfg.seed, "rmu.batches");
  AdamT<S> opt(cfg.learning_rate);
  LmParamsT<S> grads = zeros_like(lm);
  auto grad_ptrs = [&] {
    std::vector<const MatT<S>*> out;
    for (int l : cfg.train_layers) {
      auto& L = grads.layers[size_t(l)];
      for (MatT<S>* m : {&L.wq, &L.wk, &L.wv, &L.wo, &L.w1, &L.b1, &L.w2, &L.b2})
        out.push_back(m);
    }
    return out;
  };

  std::map<size_t, ActivationRecordT<S>> frozen_cache;
  for (long step = 0; step < cfg.steps; ++step) {
    for (auto* g : grads.tensors()) g->setZero();
    double loss = 0.0;

    // steer target residuals toward the fixed direction
    for (int b = 0; b < cfg.batch_docs; ++b) {
      const auto& doc = corpora.target[size_t(rng.randint(0, int64_t(corpora.target.size()) - 1))];
      ActivationRecordT<S> rec;
      ForwardCacheT<S> cache;
      lm_forward<S>(lm, nullptr, doc.tokens, cfg.act_layers, &rec, &cache, false);
      std::map<int, MatT<S>> inj;
      const double norm =
          1.0 / (double(rec.positions.size()) * double(cfg.act_layers.size()) * cfg.batch_docs);
      for (int l : cfg.act_layers) {
        MatT<S> diff = rec.layers.at(l);
        diff.rowwise() -= target_vec.transpose();
        loss += double(diff.squaredNorm()) * norm;
        inj[l] = (S(2) * S(norm)) * diff;
      }
      lm_backward<S>(lm, nullptr, cache, {}, inj, &grads, nullptr);
    }

    // keep retain residuals near the frozen model
    for (int b = 0; b < cfg.batch_docs; ++b) {
      const size_t idx = size_t(rng.randint(0, int64_t(corpora.retain.size()) - 1));
      const auto& doc = corpora.retain[idx];
      auto it = frozen_cache.find(idx);
      if (it == frozen_cache.end()) {
        ActivationRecordT<S> ref;
        lm_forward<S>(lm_frozen, nullptr, doc.tokens, cfg.act_layers, &ref, nullptr, false);
        it = frozen_cache.emplace(idx, std::move(ref)).first;
      }
      ActivationRecordT<S> rec;
      ForwardCacheT<S> cache;
      lm_forward<S>(lm, nullptr, doc.tokens, cfg.act_layers, &rec, &cache, false);
      std::map<int, MatT<S>> inj;
      const double norm = cfg.alpha_rmu / (double(rec.positions.size()) *
                                           double(cfg.act_layers.size()) * cfg.batch_docs);
      for (int l : cfg.act_layers) {
        MatT<S> diff = rec.layers.at(l) - it->second.layers.at(l);
        loss += double(diff.squaredNorm()) * norm;
        inj[l] = (S(2) * S(norm)) * diff;
      }
      lm_backward<S>(lm, nullptr, cache, {}, inj, &grads, nullptr);
    }

    if (!std::isfinite(loss)) throw TrainError("rmu loss diverged", step);
    opt.step(params, grad_ptrs());
  }
  return lm;
}

}  // namespace crisp
