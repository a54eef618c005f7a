#pragma once

#include <span>
#include <string>

#include "comal/bimal/flow.hpp"
#include "comal/ndgrad/tensor.hpp"
#include "comal/synthworld/world.hpp"

namespace comal::bimal {

/// Log-smoothed code of a soft map: log((1 - eps) y + eps / C), flattened.
/// y: [H, W, C] -> [H*W*C], or [B, H, W, C] -> [B, H*W*C].
nd::Tensor relax(const nd::Tensor& y, double eps);
/// Inverse of relax, reshaped to [B, H, W, C].
nd::Tensor unrelax(const nd::Tensor& v, std::size_t height, std::size_t width,
                   std::size_t classes, double eps);

/// One-hot [B, H, W, C] maps from hard labels.
nd::Tensor one_hot(std::span<const world::LabelMap> labels, std::size_t classes);
/// Keeps every `stride`-th row and column of a [B, H, W, C] map.
nd::Tensor subsample_map(const nd::Tensor& y, std::size_t stride);

/// Packs images into a constant [B, H, W, 3] tensor.
nd::Tensor images_nhwc(std::span<const world::Image* const> images);

enum class TauForm { kPaper, kBilateral };
TauForm parse_tau_form(const std::string& name);
std::string tau_form_name(TauForm form);

/// Neighbor regularizer summed over ordered 4-connected pixel pairs.
/// image: [B, H, W, 3] (constant), y: [B, H, W, C]. Returns [B].
///   paper:     exp(-|dx|^2 / 2 s1^2 - |dy|^2 / 2 s2^2)
///   bilateral: exp(-|dx|^2 / 2 s1^2) * (1 - exp(-|dy|^2 / 2 s2^2))
nd::Tensor tau(const nd::Tensor& image, const nd::Tensor& y, double sigma1, double sigma2,
               TauForm form);

struct BimalSettings {
  double eps = 0.02;
  std::size_t stride = 2;
  double sigma1 = 0.5;
  double sigma2 = 0.5;
  TauForm form = TauForm::kBilateral;
  bool use_tau = true;
};

struct BimalTerms {
  nd::Tensor nll;  // [B], on the subsampled relaxed map
  nd::Tensor tau;  // [B], on the full-resolution map; zeros if disabled
};

BimalTerms bimal_terms(const FlowModel& model, const nd::Tensor& image, const nd::Tensor& y,
                       const BimalSettings& settings);
/// Batch mean of nll + tau; differentiable with respect to y.
nd::Tensor bimal_loss(const FlowModel& model, const nd::Tensor& image, const nd::Tensor& y,
                      const BimalSettings& settings);

/// Sample mean of nll + tau over a set of predictions, without gradients.
double uds_estimate(const FlowModel& model, const nd::Tensor& images, const nd::Tensor& y,
                    const BimalSettings& settings);

/// Flattened relaxed codes of ground-truth maps, ready for train_flow.
nd::Tensor relaxed_codes(std::span<const world::LabelMap> labels, const BimalSettings& settings,
                         std::size_t classes = world::kNumClasses);

/// Flow configuration sized for maps of the given resolution.
FlowConfig flow_config_for(std::size_t height, std::size_t width, const BimalSettings& settings,
                           std::size_t classes = world::kNumClasses);

}  // namespace comal::bimal
