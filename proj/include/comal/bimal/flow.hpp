#pragma once

#include <cstdint>
#include <vector>

#include "comal/ndgrad/serialize.hpp"
#include "comal/ndgrad/tensor.hpp"

namespace comal::bimal {

struct FlowConfig {
  std::size_t dim = 0;
  std::size_t layers = 6;
  std::size_t hidden = 64;
  /// Scale outputs are soft-clamped to (-scale_clamp, scale_clamp); <= 0 disables.
  double scale_clamp = 2.0;
  /// Seed for the fixed inter-layer permutations.
  std::uint64_t permutation_seed = 0x9e17;
};

enum class FlowInit {
  kIdentity,  // output layers of the subnetworks are zero
  kRandom,    // every weight drawn at random
};

/// Two-layer perceptron: tanh(x W1 + b1) W2 + b2.
struct Perceptron {
  nd::Tensor w1, b1, w2, b2;
  nd::Tensor operator()(const nd::Tensor& x) const;
};

/// Affine coupling: the dimensions with index parity `parity` pass through
/// and condition a scale/translation applied to the others. The result is
/// then shuffled by `permutation`.
struct CouplingLayer {
  std::vector<std::size_t> pass;
  std::vector<std::size_t> transformed;
  Perceptron scale;
  Perceptron shift;
  std::vector<std::size_t> permutation;  // out[j] = in[permutation[j]]
  std::vector<std::size_t> gather;       // combined unsplit + permutation
};

/// Invertible map built from an elementwise affine layer followed by a stack
/// of affine couplings. log|det J| is the sum of all scale outputs.
class FlowModel {
 public:
  FlowModel() = default;
  FlowModel(const FlowConfig& cfg, std::uint64_t seed, FlowInit init = FlowInit::kIdentity);

  const FlowConfig& config() const { return cfg_; }
  std::size_t dim() const { return cfg_.dim; }

  struct Result {
    nd::Tensor z;       // [B, d]
    nd::Tensor logdet;  // [B]
  };

  /// v: [B, d] or [d]. Throws naming the layer if an output is non-finite.
  Result forward(const nd::Tensor& v) const;
  /// Exact inverse of forward (no gradient).
  nd::Tensor inverse(const nd::Tensor& z) const;

  std::vector<nd::Tensor> parameters() const;
  nd::NamedTensors named() const;
  void load(const nd::NamedTensors& named);
  FlowModel clone() const;

  /// Elementwise affine stage: v * exp(log_scale) + bias.
  nd::Tensor& log_scale() { return log_scale_; }
  nd::Tensor& bias() { return bias_; }
  std::vector<CouplingLayer>& couplings() { return layers_; }
  const std::vector<CouplingLayer>& couplings() const { return layers_; }

 private:
  nd::Tensor clamp_scale(const nd::Tensor& raw) const;

  FlowConfig cfg_;
  nd::Tensor log_scale_;
  nd::Tensor bias_;
  std::vector<CouplingLayer> layers_;
};

/// Standard normal log density per row: -(d/2) log(2 pi) - |z|^2 / 2.
nd::Tensor prior_logprob(const nd::Tensor& z);
/// Negative log-likelihood per row under the flow.
nd::Tensor nll(const FlowModel& model, const nd::Tensor& v);

struct FlowTrainOptions {
  std::size_t epochs = 20;
  std::size_t batch = 16;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  /// Initialize the elementwise stage from data moments before training.
  bool data_init = true;
  /// Added to each per-dimension variance in the data init; keeps dimensions
  /// that never vary in training from being scaled up without bound.
  double variance_floor = 1.0;
};

struct FlowTrainReport {
  std::vector<double> epoch_nll;  // mean training nll per epoch
};

/// Maximum-likelihood fit on rows of `data` ([M, d]) with Adam.
FlowTrainReport train_flow(FlowModel& model, const nd::Tensor& data,
                           const FlowTrainOptions& opts);

/// Mean nll over rows, evaluated without gradients.
double mean_nll(const FlowModel& model, const nd::Tensor& data);

}  // namespace comal::bimal
