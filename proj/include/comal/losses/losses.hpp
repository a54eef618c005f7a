#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "comal/bimal/bimal.hpp"
#include "comal/costruct/structnet.hpp"
#include "comal/ndgrad/tensor.hpp"
#include "comal/segnet/segnet.hpp"
#include "comal/synthworld/world.hpp"

namespace comal::losses {

inline constexpr std::uint8_t kIgnore = 255;

/// Hard targets where kIgnore marks pixels that carry no supervision.
struct PseudoLabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  std::size_t ignored() const;
};

PseudoLabelMap as_targets(const world::LabelMap& labels);
std::vector<PseudoLabelMap> as_targets(std::span<const world::LabelMap> labels);

/// Weighted negative log-likelihood from log-probabilities [B, H, W, C]:
/// -sum w(t) log p_t over non-ignored pixels, divided by their count.
/// Empty `weights` means all ones. Throws if every pixel is ignored.
nd::Tensor nll_loss(const nd::Tensor& log_probs, std::span<const PseudoLabelMap> targets,
                    std::span<const double> weights = {});

/// Same on probabilities, through the clamped log.
nd::Tensor cross_entropy(const nd::Tensor& probs, std::span<const PseudoLabelMap> targets,
                         std::span<const double> weights = {});
nd::Tensor cross_entropy(const nd::Tensor& probs, std::span<const world::LabelMap> labels,
                         std::span<const double> weights = {});

/// -(1/log C) sum y log y over every pixel of every map.
nd::Tensor entropy_loss(const nd::Tensor& y);
/// entropy_loss divided by the number of pixels.
nd::Tensor entropy_loss_mean(const nd::Tensor& y);

std::vector<double> uniform_distribution(std::size_t classes);
/// w_c = min(q'_c / max(q_c, 1e-6), clamp). Empty q' means uniform.
std::vector<double> class_weights(std::span<const double> q, std::span<const double> qprime,
                                  double clamp);

/// Argmax where the top probability reaches `threshold`, else kIgnore.
std::vector<PseudoLabelMap> pseudo_labels(const nd::Tensor& probs, double threshold);

struct LossConfig {
  double lambda_bimal = 1e-3;
  double lambda_comal = 1e-3;
  double pseudo_threshold = 0.9;
  double weight_clamp = 10.0;
  std::vector<double> qprime;  // empty: uniform
  bool class_balanced = true;
  std::size_t comal_anchors = 4;
  bimal::BimalSettings bimal;
};

struct ObjectiveTerms {
  nd::Tensor total;
  double ce_source = 0.0;
  double ce_target = 0.0;
  double nll = 0.0;
  double tau = 0.0;
  double comal_source = 0.0;
  double comal_target = 0.0;
  /// Set when every target pixel fell below the pseudo-label threshold.
  bool target_skipped = false;
};

/// Supervised cross-entropy on the source plus lambda_b times the BiMaL
/// loss of the target predictions under a frozen flow.
ObjectiveTerms objective_bimal(const seg::SegOutput& source,
                               std::span<const world::LabelMap> source_labels,
                               const seg::SegOutput& target, const nd::Tensor& target_images,
                               const bimal::FlowModel& flow, const LossConfig& cfg);

/// Class-weighted cross-entropy on the source, class-weighted pseudo-label
/// cross-entropy on the target and lambda_c times the conditional
/// likelihood loss of both domains' predictions.
ObjectiveTerms objective_comal(const seg::SegOutput& source,
                               std::span<const world::LabelMap> source_labels,
                               const seg::SegOutput& target, const costruct::StructNet& net,
                               std::span<const double> q_source, const LossConfig& cfg,
                               std::uint64_t seed);

/// Predictions [B, H, W, C] subsampled onto the structure network's grid.
nd::Tensor to_struct_grid(const nd::Tensor& probs, const costruct::StructConfig& cfg);

}  // namespace comal::losses
