#pragma once

#include "crisp/common.hpp"

#include <cmath>
#include <vector>

namespace crisp {

// Adaptive-moment optimizer over a list of tensors. The parameter list must
// keep the same shapes across steps; moments are laid out flat.
template <class S>
class AdamT {
 public:
  explicit AdamT(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<MatT<S>*>& params, const std::vector<const MatT<S>*>& grads) {
    Eigen::Index total = 0;
    for (const auto* p : params) total += p->size();
    if (m_.size() != total) {
      m_ = VecT<S>::Zero(total);
      v_ = VecT<S>::Zero(total);
      t_ = 0;
    }
    ++t_;
    const S bc1 = S(1) - S(std::pow(beta1_, t_));
    const S bc2 = S(1) - S(std::pow(beta2_, t_));
    Eigen::Index off = 0;
    for (size_t i = 0; i < params.size(); ++i) {
      auto p = Eigen::Map<VecT<S>>(params[i]->data(), params[i]->size());
      auto g = Eigen::Map<const VecT<S>>(grads[i]->data(), grads[i]->size());
      auto m = m_.segment(off, p.size());
      auto v = v_.segment(off, p.size());
      m = S(beta1_) * m + (S(1) - S(beta1_)) * g;
      v = S(beta2_) * v.array().matrix() + (S(1) - S(beta2_)) * g.array().square().matrix();
      p -= (S(lr_) * (m / bc1).array() / ((v / bc2).array().sqrt() + S(eps_))).matrix();
      off += p.size();
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  long steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  VecT<S> m_, v_;
  long t_ = 0;
};

}  // namespace crisp
