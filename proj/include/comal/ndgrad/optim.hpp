#pragma once

#include <vector>

#include "comal/ndgrad/tensor.hpp"

namespace comal::nd {

struct SgdOptions {
  double lr = 2.5e-4;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// Heavy-ball SGD:  v <- momentum * v + grad + weight_decay * p;  p <- p - lr * v.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, SgdOptions opts);

  /// Applies one update from the parameters' current gradients (missing
  /// gradients count as zero) and clears them. Throws on a non-finite
  /// gradient before touching any parameter.
  void step();
  void zero_grad();

  SgdOptions& options() { return opts_; }
  const std::vector<std::vector<double>>& velocity() const { return velocity_; }
  std::vector<std::vector<double>>& velocity() { return velocity_; }

 private:
  std::vector<Tensor> params_;
  SgdOptions opts_;
  std::vector<std::vector<double>> velocity_;
};

/// Single-tensor form of the update above, for direct use and testing.
void sgd_update(std::span<double> param, std::span<const double> grad,
                std::span<double> velocity, const SgdOptions& opts);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Global gradient-norm clip; <= 0 disables.
  double clip_norm = 0.0;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions opts);
  void step();
  void zero_grad();

 private:
  std::vector<Tensor> params_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace comal::nd
