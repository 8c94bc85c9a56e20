#pragma once

#include "crisp/adam.hpp"
#include "crisp/checkpoint.hpp"
#include "crisp/common.hpp"
#include "crisp/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace crisp {

enum class SaeActivation { relu, topk };

struct SaeConfig {
  int d_model = 64;
  int d_sae = 512;
  SaeActivation activation = SaeActivation::relu;
  int k_act = 32;  // only for topk
  // Strong enough that features specialize; weaker penalties leave a dense
  // code whose top features fail the tau ratio filter downstream.
  double l1_coeff = 0.15;
  // Pin b_enc at zero. A trained (negative) encoder bias gives every feature
  // ReLU slack: an adapter can zero the whole code while the residual keeps
  // its content, so suppression stops being behaviorally meaningful. With
  // b_enc = 0 and an encoder that positively spans the residual space, a
  // near-zero code forces a near-zero residual.
  bool pin_enc_bias = true;
  int layer = 0;
  uint64_t seed = 0;

  void validate() const {
    if (d_sae <= d_model) throw ConfigError("d_sae must exceed d_model");
    if (l1_coeff < 0) throw ConfigError("l1 coefficient must be >= 0");
    if (activation == SaeActivation::topk && k_act < 1)
      throw ConfigError("topk needs k_act >= 1");
  }
};

template <class S>
struct SaeParamsT {
  int layer = 0;
  SaeActivation activation = SaeActivation::relu;
  int k_act = 0;
  S l1_coeff = S(0);
  bool pin_enc_bias = false;
  MatT<S> w_enc;  // [d_sae, d_model]
  MatT<S> b_enc;  // [d_sae, 1]
  MatT<S> w_dec;  // [d_model, d_sae]
  MatT<S> b_dec;  // [d_model, 1]

  int d_model() const { return int(w_enc.cols()); }
  int d_sae() const { return int(w_enc.rows()); }

  std::vector<MatT<S>*> tensors() { return {&w_enc, &b_enc, &w_dec, &b_dec}; }
};

template <class S>
SaeParamsT<S> init_sae(const SaeConfig& cfg) {
  cfg.validate();
  SaeParamsT<S> sae;
  sae.layer = cfg.layer;
  sae.activation = cfg.activation;
  sae.k_act = cfg.k_act;
  sae.l1_coeff = S(cfg.l1_coeff);
  sae.pin_enc_bias = cfg.pin_enc_bias;
  Rng rng(cfg.seed, "sae.init", uint64_t(cfg.layer));
  sae.w_dec.resize(cfg.d_model, cfg.d_sae);
  for (Eigen::Index j = 0; j < cfg.d_sae; ++j) {
    for (Eigen::Index i = 0; i < cfg.d_model; ++i) sae.w_dec(i, j) = S(rng.normal());
    sae.w_dec.col(j).normalize();
  }
  sae.w_enc = sae.w_dec.transpose();  // common transpose init
  sae.b_enc = MatT<S>::Zero(cfg.d_sae, 1);
  sae.b_dec = MatT<S>::Zero(cfg.d_model, 1);
  return sae;
}

namespace detail {

template <class S>
void apply_topk_rows(MatT<S>& a, int k) {
  if (k >= int(a.cols())) return;
  std::vector<Eigen::Index> idx(size_t(a.cols()));
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    std::iota(idx.begin(), idx.end(), 0);
    std::nth_element(idx.begin(), idx.begin() + k, idx.end(),
                     [&](Eigen::Index i, Eigen::Index j) { return a(r, i) > a(r, j); });
    for (size_t s = size_t(k); s < idx.size(); ++s) a(r, idx[s]) = S(0);
  }
}

}  // namespace detail

// Batch encode: rows are activations. a = sigma(W_enc h + b_enc).
template <class S>
MatT<S> sae_encode(const SaeParamsT<S>& sae, const MatT<S>& h_rows) {
  MatT<S> z = h_rows * sae.w_enc.transpose();
  z.rowwise() += sae.b_enc.col(0).transpose();
  MatT<S> a = z.cwiseMax(S(0));
  if (sae.activation == SaeActivation::topk) detail::apply_topk_rows(a, sae.k_act);
  return a;
}

template <class S>
VecT<S> sae_encode(const SaeParamsT<S>& sae, const VecT<S>& h) {
  MatT<S> a = sae_encode(sae, MatT<S>(h.transpose()));
  return a.row(0).transpose();
}

template <class S>
MatT<S> sae_decode(const SaeParamsT<S>& sae, const MatT<S>& a_rows) {
  MatT<S> h = a_rows * sae.w_dec.transpose();
  h.rowwise() += sae.b_dec.col(0).transpose();
  return h;
}

template <class S>
VecT<S> sae_decode(const SaeParamsT<S>& sae, const VecT<S>& a) {
  MatT<S> h = sae_decode(sae, MatT<S>(a.transpose()));
  return h.row(0).transpose();
}

// Reconstruction + sparsity objective for a single activation vector.
template <class S>
double sae_loss(const SaeParamsT<S>& sae, const VecT<S>& h) {
  VecT<S> a = sae_encode(sae, h);
  VecT<S> hhat = sae_decode(sae, a);
  return double((hhat - h).squaredNorm()) + double(sae.l1_coeff) * double(a.template lpNorm<1>());
}

// Mean loss over batch rows with parameter gradients; used by training and
// the gradient-check suite.
template <class S>
double sae_loss_grad(const SaeParamsT<S>& sae, const MatT<S>& h_rows, SaeParamsT<S>* grads) {
  const Eigen::Index n = h_rows.rows();
  MatT<S> z = h_rows * sae.w_enc.transpose();
  z.rowwise() += sae.b_enc.col(0).transpose();
  MatT<S> a = z.cwiseMax(S(0));
  if (sae.activation == SaeActivation::topk) detail::apply_topk_rows(a, sae.k_act);
  MatT<S> r = a * sae.w_dec.transpose();
  r.rowwise() += sae.b_dec.col(0).transpose();
  r -= h_rows;
  const double loss =
      (r.squaredNorm() + double(sae.l1_coeff) * a.sum()) / double(n);
  if (grads) {
    MatT<S> dr = (S(2) / S(n)) * r;
    grads->w_dec.noalias() += dr.transpose() * a;
    grads->b_dec.col(0) += dr.colwise().sum().transpose();
    MatT<S> da = dr * sae.w_dec;
    da.array() += sae.l1_coeff / S(n);
    MatT<S> dz = (da.array() * (a.array() > S(0)).template cast<S>()).matrix();
    grads->w_enc.noalias() += dz.transpose() * h_rows;
    grads->b_enc.col(0) += dz.colwise().sum().transpose();
  }
  return loss;
}

// d loss / d h for a given upstream gradient on the activations a. The mask
// comes from the actual encode of h_rows.
template <class S>
MatT<S> sae_encode_backward_h(const SaeParamsT<S>& sae, const MatT<S>& h_rows, const MatT<S>& da) {
  MatT<S> a = sae_encode(sae, h_rows);
  MatT<S> dz = (da.array() * (a.array() > S(0)).template cast<S>()).matrix();
  return dz * sae.w_enc;
}

struct SaeTrainConfig {
  long steps = 6000;
  int batch = 256;
  double lr = 1e-3;
  double target_loss = 0.0;  // 0 disables early stop
  long min_tokens = 512;
  double holdout_frac = 0.1;
  uint64_t seed = 0;
};

struct SaeTrainReport {
  long steps_run = 0;
  bool reached_target = false;
  double holdout_loss = 0.0;
  double explained_variance = 0.0;
  double mean_l0 = 0.0;
  int resampled_features = 0;
};

template <class S>
double explained_variance(const SaeParamsT<S>& sae, const MatT<S>& h_rows) {
  MatT<S> hhat = sae_decode(sae, sae_encode(sae, h_rows));
  VecT<S> mean = h_rows.colwise().mean().transpose();
  MatT<S> centered = h_rows.rowwise() - mean.transpose();
  const double denom = double(centered.squaredNorm());
  if (denom == 0.0) return 0.0;
  return 1.0 - double((hhat - h_rows).squaredNorm()) / denom;
}

template <class S>
SaeTrainReport train_sae(SaeParamsT<S>& sae, const MatT<S>& acts, const SaeTrainConfig& cfg) {
  if (acts.rows() < cfg.min_tokens) throw ConfigError("insufficient activation data for SAE");
  Rng rng(cfg.seed, "sae.train", uint64_t(sae.layer));

  std::vector<Eigen::Index> order(size_t(acts.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());
  const Eigen::Index n_hold = std::max<Eigen::Index>(1, Eigen::Index(double(acts.rows()) * cfg.holdout_frac));
  const Eigen::Index n_train = acts.rows() - n_hold;
  MatT<S> train(n_train, acts.cols()), hold(n_hold, acts.cols());
  for (Eigen::Index i = 0; i < n_train; ++i) train.row(i) = acts.row(order[size_t(i)]);
  for (Eigen::Index i = 0; i < n_hold; ++i) hold.row(i) = acts.row(order[size_t(n_train + i)]);

  SaeTrainReport report;
  if (cfg.steps == 0) return report;

  AdamT<S> opt(cfg.lr);
  auto params = sae.tensors();
  SaeParamsT<S> grads = sae;
  const long epoch_steps = std::max<long>(1, n_train / cfg.batch);
  VecT<S> epoch_activity = VecT<S>::Zero(sae.d_sae());

  for (long step = 0; step < cfg.steps; ++step) {
    MatT<S> batch(std::min<Eigen::Index>(cfg.batch, n_train), acts.cols());
    for (Eigen::Index i = 0; i < batch.rows(); ++i)
      batch.row(i) = train.row(rng.randint(0, n_train - 1));
    for (auto* g : grads.tensors()) g->setZero();
    const double loss = sae_loss_grad(sae, batch, &grads);
    if (!std::isfinite(loss)) throw TrainError("sae loss diverged", step);
    if (sae.pin_enc_bias) grads.b_enc.setZero();
    std::vector<const MatT<S>*> cg;
    for (auto* g : grads.tensors()) cg.push_back(g);
    opt.step(params, cg);
    for (Eigen::Index j = 0; j < sae.w_dec.cols(); ++j) {
      const S norm = sae.w_dec.col(j).norm();
      if (norm > S(0)) sae.w_dec.col(j) /= norm;
    }
    epoch_activity += sae_encode(sae, batch).colwise().sum().transpose();

    if ((step + 1) % epoch_steps == 0) {
      // Re-seat features that stayed silent for a whole epoch on a
      // poorly-reconstructed example.
      std::vector<Eigen::Index> dead;
      for (Eigen::Index j = 0; j < epoch_activity.size(); ++j)
        if (epoch_activity(j) == S(0)) dead.push_back(j);
      if (!dead.empty()) {
        MatT<S> probe(std::min<Eigen::Index>(64, n_train), acts.cols());
        for (Eigen::Index i = 0; i < probe.rows(); ++i)
          probe.row(i) = train.row(rng.randint(0, n_train - 1));
        MatT<S> res = sae_decode(sae, sae_encode(sae, probe)) - probe;
        std::vector<Eigen::Index> by_err(size_t(probe.rows()));
        std::iota(by_err.begin(), by_err.end(), 0);
        std::sort(by_err.begin(), by_err.end(), [&](Eigen::Index i, Eigen::Index j) {
          return res.row(i).squaredNorm() > res.row(j).squaredNorm();
        });
        for (size_t d = 0; d < dead.size(); ++d) {
          const auto src = probe.row(by_err[d % by_err.size()]);
          VecT<S> dir = src.transpose() - sae.b_dec.col(0);
          if (dir.norm() == S(0)) continue;
          dir.normalize();
          sae.w_dec.col(dead[d]) = dir;
          sae.w_enc.row(dead[d]) = dir.transpose();
          sae.b_enc(dead[d], 0) = S(0);
          ++report.resampled_features;
        }
      }
      epoch_activity.setZero();
    }

    report.steps_run = step + 1;
    if (cfg.target_loss > 0 && (step + 1) % epoch_steps == 0) {
      const double hold_loss = sae_loss_grad<S>(sae, hold, nullptr);
      if (hold_loss < cfg.target_loss) {
        report.reached_target = true;
        break;
      }
    }
  }

  report.holdout_loss = sae_loss_grad<S>(sae, hold, nullptr);
  report.explained_variance = explained_variance(sae, hold);
  MatT<S> a_hold = sae_encode(sae, hold);
  report.mean_l0 = double((a_hold.array() > S(0)).template cast<double>().sum()) / double(a_hold.rows());
  if (cfg.target_loss > 0 && report.holdout_loss < cfg.target_loss) report.reached_target = true;
  return report;
}

inline const char* sae_activation_name(SaeActivation a) {
  return a == SaeActivation::relu ? "relu" : "topk";
}

template <class S>
void save_sae(const std::string& path, const SaeParamsT<S>& sae) {
  TensorContainer c;
  c.meta = {{"tool_version", kToolVersion},
            {"layer", sae.layer},
            {"activation", sae_activation_name(sae.activation)},
            {"k_act", sae.k_act},
            {"l1_coeff", double(sae.l1_coeff)},
            {"pin_enc_bias", sae.pin_enc_bias}};
  c.add("w_enc", to_f32<S>(sae.w_enc));
  c.add("b_enc", to_f32<S>(sae.b_enc));
  c.add("w_dec", to_f32<S>(sae.w_dec));
  c.add("b_dec", to_f32<S>(sae.b_dec));
  save_container(path, "CRSA", c);
}

template <class S>
SaeParamsT<S> load_sae(const std::string& path) {
  auto c = load_container(path, "CRSA");
  SaeParamsT<S> sae;
  sae.layer = c.meta.at("layer");
  sae.activation = c.meta.at("activation") == "topk" ? SaeActivation::topk : SaeActivation::relu;
  sae.k_act = c.meta.at("k_act");
  sae.l1_coeff = S(c.meta.at("l1_coeff").get<double>());
  sae.pin_enc_bias = c.meta.value("pin_enc_bias", false);
  sae.w_enc = from_f32<S>(c.get("w_enc"));
  sae.b_enc = from_f32<S>(c.get("b_enc"));
  sae.w_dec = from_f32<S>(c.get("w_dec"));
  sae.b_dec = from_f32<S>(c.get("b_dec"));
  return sae;
}

using SaeParams = SaeParamsT<real>;

}  // namespace crisp
