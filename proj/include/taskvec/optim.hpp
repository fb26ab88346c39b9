#pragma once

#include <cstdint>
#include <vector>

#include "taskvec/tensor.hpp"

namespace taskvec {

// Adaptive moments with decoupled weight decay. Parameter order must stay
// fixed across steps; moment slots are keyed by position.
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
        double weight_decay = 0.01)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  // decay[i] selects which parameters the decoupled decay applies to
  // (weight matrices yes; biases, gate scalars, and coefficient tables no).
  void step(const std::vector<Tensor*>& params,
            const std::vector<const Tensor*>& grads,
            const std::vector<bool>& decay, double lr);

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::int64_t t_ = 0;
  struct Slot {
    Tensor m, v;
  };
  std::vector<Slot> slots_;
};

// Half-cosine ramp from base_lr down to zero over total_steps.
double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps);

}  // namespace taskvec
