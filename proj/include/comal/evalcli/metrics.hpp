#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "comal/ndgrad/tensor.hpp"
#include "comal/segnet/segnet.hpp"
#include "comal/synthworld/world.hpp"

namespace comal::eval {

/// Rows are ground truth, columns predictions.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t c = world::kNumClasses) : classes(c), counts(c * c, 0) {}
  void add(const world::LabelMap& pred, const world::LabelMap& gt);
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts[gt * classes + pred]; }
  std::uint64_t total() const;
};

ConfusionMatrix confusion(std::span<const world::LabelMap> preds,
                          std::span<const world::LabelMap> gts,
                          std::size_t classes = world::kNumClasses);

struct MetricsReport {
  std::vector<double> iou;     // per class; 0 for classes absent from GT and prediction
  std::vector<bool> present;   // class occurs in GT or prediction
  double miou = 0.0;           // mean over present classes
  double head_iou = 0.0;       // mean over present non-tail classes
  double tail_iou = 0.0;       // mean over present tail classes
  std::vector<std::size_t> tail_classes;
};

MetricsReport metrics_from(const ConfusionMatrix& cm,
                           std::span<const std::size_t> tail = world::kTailClasses);
MetricsReport miou(std::span<const world::LabelMap> preds, std::span<const world::LabelMap> gts,
                   std::size_t classes = world::kNumClasses,
                   std::span<const std::size_t> tail = world::kTailClasses);

enum class GradAggregation {
  kSum,   // total |dL/dlogit| over the class's pixels
  kMean,  // average over the class's pixels
};

using SegLoss = std::function<nd::Tensor(const seg::SegOutput&)>;

/// Per-class magnitude of the loss gradient with respect to the logits,
/// grouped by ground-truth class and divided by the largest entry. Absent
/// classes get 0.
std::vector<double> grad_per_class(const seg::SegParams& params, const nd::Tensor& images,
                                   std::span<const world::LabelMap> labels, const SegLoss& loss,
                                   GradAggregation agg = GradAggregation::kSum);

/// Same grouping applied to an explicit logit-gradient tensor [B, H, W, C].
std::vector<double> group_gradients(const nd::Tensor& logit_grad,
                                    std::span<const world::LabelMap> labels,
                                    GradAggregation agg = GradAggregation::kSum);

/// Standard deviation of the nonzero entries.
double nonzero_std(std::span<const double> values);

/// Hard predictions for every map in a [B, H, W, C] probability tensor.
std::vector<world::LabelMap> predict_labels(const nd::Tensor& probs);

}  // namespace comal::eval
