#pragma once

#include <vector>

#include "detox/tensor.hpp"

namespace detox {

class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, double learning_rate = 1e-3, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8);

  // Applies one update from the accumulated gradients; parameters without a
  // gradient are treated as having zero gradient.
  void step();
  void zero_grad();
  // L2 norm of the gradients currently accumulated on the parameters.
  double grad_norm() const;
  void set_learning_rate(double lr) { lr_ = lr; }
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

}  // namespace detox
