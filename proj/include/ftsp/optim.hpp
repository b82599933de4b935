#pragma once

#include <cmath>
#include <vector>

#include "ftsp/nn.hpp"

namespace ftsp {

struct AdamWConfig {
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
  Real weight_decay = 1e-5;
  Real clip_norm = 0.0;  // global gradient-norm cap; 0 disables
};

// Adam moments with weight decay applied to the weights directly.
class AdamW {
 public:
  AdamW(const ParamList& params, const AdamWConfig& cfg) : cfg_(cfg) {
    for (const auto& e : params.params()) {
      params_.push_back(e.tensor);
      m_.emplace_back(e.tensor.numel(), 0.0);
      v_.emplace_back(e.tensor.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // Scales every gradient by `factor`, e.g. to average accumulated micro-batches.
  void scale_grads(Real factor) {
    for (auto& p : params_)
      if (p.has_grad())
        for (Real& g : p.mutable_grad()) g *= factor;
  }

  Real grad_norm() const {
    Real sq = 0;
    for (const auto& p : params_)
      if (p.has_grad())
        for (Real g : p.grad()) sq += g * g;
    return std::sqrt(sq);
  }

  // Applies one update and returns the pre-clipping gradient norm.
  Real step(Real lr) {
    const Real norm = grad_norm();
    const Real clip = cfg_.clip_norm > 0 && norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const Real bc1 = 1 - std::pow(cfg_.beta1, static_cast<Real>(t_));
    const Real bc2 = 1 - std::pow(cfg_.beta2, static_cast<Real>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      auto& w = p.mutable_data();
      const bool has = p.has_grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const Real g = has ? p.grad()[j] * clip : 0.0;
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1 - cfg_.beta1) * g;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1 - cfg_.beta2) * g * g;
        w[j] -= lr * cfg_.weight_decay * w[j];
        w[j] -= lr * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + cfg_.eps);
      }
    }
    return norm;
  }

  std::size_t steps() const { return t_; }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<std::vector<Real>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace ftsp
