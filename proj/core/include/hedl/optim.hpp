#pragma once

#include <vector>

#include "hedl/tensor.hpp"

namespace hedl {

/// Adaptive-moment optimizer with decoupled weight decay. Parameters are
/// shared handles: step() mutates the tensors they point at, using whatever
/// gradients the last backward() left in place.
class AdamW {
 public:
  explicit AdamW(std::vector<Tensor> params, double lr, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0);

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step();
  void zero_grad();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  int64_t t_ = 0;
};

}  // namespace hedl
