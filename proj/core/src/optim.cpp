#include "hedl/optim.hpp"

#include <cmath>

namespace hedl {

AdamW::AdamW(std::vector<Tensor> params, double lr, double beta1, double beta2,
             double eps, double weight_decay)
    : params_(std::move(params)),
      lr_(lr),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      weight_decay_(weight_decay) {
  for (auto& p : params_) {
    if (!p.requires_grad()) throw ContractError("AdamW: parameter does not require grad");
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    auto data = params_[pi].mutable_data();
    auto grad = params_[pi].grad();
    auto& m = m_[pi];
    auto& v = v_[pi];
    for (size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      data[i] -= lr_ * weight_decay_ * data[i];
      data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace hedl
