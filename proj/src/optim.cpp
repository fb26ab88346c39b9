#include "taskvec/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace taskvec {

void AdamW::step(const std::vector<Tensor*>& params,
                 const std::vector<const Tensor*>& grads,
                 const std::vector<bool>& decay, double lr) {
  if (params.size() != grads.size() || params.size() != decay.size()) {
    throw std::invalid_argument("optimizer: mismatched parameter lists");
  }
  if (slots_.empty()) {
    slots_.reserve(params.size());
    for (const Tensor* p : params) {
      slots_.push_back({Tensor::zeros(p->shape()), Tensor::zeros(p->shape())});
    }
  } else if (slots_.size() != params.size()) {
    throw std::invalid_argument("optimizer: parameter count changed");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = *grads[k];
    if (!(p.shape() == g.shape())) {
      throw std::invalid_argument("optimizer: gradient shape mismatch");
    }
    Slot& s = slots_[k];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      if (decay[k]) p[i] -= lr * weight_decay_ * p[i];
    }
  }
}

double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) throw std::invalid_argument("total_steps must be > 0");
  if (step < 0) step = 0;
  if (step > total_steps) step = total_steps;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

}  // namespace taskvec
