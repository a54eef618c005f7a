#include "comal/evalcli/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace comal::eval {

void ConfusionMatrix::add(const world::LabelMap& pred, const world::LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw nd::ShapeError("confusion", {gt.height, gt.width}, {pred.height, pred.width});
  }
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const std::size_t g = gt.labels[i], p = pred.labels[i];
    if (g >= classes || p >= classes) throw std::out_of_range("confusion: label out of range");
    ++counts[g * classes + p];
  }
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

ConfusionMatrix confusion(std::span<const world::LabelMap> preds,
                          std::span<const world::LabelMap> gts, std::size_t classes) {
  if (preds.empty() || preds.size() != gts.size()) {
    throw std::invalid_argument("confusion: need matching, nonempty prediction and label sets");
  }
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < preds.size(); ++i) cm.add(preds[i], gts[i]);
  return cm;
}

MetricsReport metrics_from(const ConfusionMatrix& cm, std::span<const std::size_t> tail) {
  const std::size_t C = cm.classes;
  MetricsReport r;
  r.iou.assign(C, 0.0);
  r.present.assign(C, false);
  r.tail_classes.assign(tail.begin(), tail.end());
  double all = 0.0, head = 0.0, tl = 0.0;
  std::size_t n_all = 0, n_head = 0, n_tail = 0;
  for (std::size_t c = 0; c < C; ++c) {
    std::uint64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (std::size_t k = 0; k < C; ++k) {
      if (k == c) continue;
      fp += cm.at(k, c);
      fn += cm.at(c, k);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    r.present[c] = true;
    r.iou[c] = static_cast<double>(tp) / static_cast<double>(denom);
    all += r.iou[c];
    ++n_all;
    if (std::find(tail.begin(), tail.end(), c) != tail.end()) {
      tl += r.iou[c];
      ++n_tail;
    } else {
      head += r.iou[c];
      ++n_head;
    }
  }
  r.miou = n_all ? all / static_cast<double>(n_all) : 0.0;
  r.head_iou = n_head ? head / static_cast<double>(n_head) : 0.0;
  r.tail_iou = n_tail ? tl / static_cast<double>(n_tail) : 0.0;
  return r;
}

MetricsReport miou(std::span<const world::LabelMap> preds, std::span<const world::LabelMap> gts,
                   std::size_t classes, std::span<const std::size_t> tail) {
  return metrics_from(confusion(preds, gts, classes), tail);
}

std::vector<double> group_gradients(const nd::Tensor& logit_grad,
                                    std::span<const world::LabelMap> labels,
                                    GradAggregation agg) {
  const auto& s = logit_grad.shape();
  if (s.size() != 4 || s[0] != labels.size()) {
    throw nd::ShapeError("group_gradients expects [B,H,W,C], got " + nd::shape_str(s));
  }
  const std::size_t P = s[1] * s[2], C = s[3];
  std::vector<double> total(C, 0.0);
  std::vector<std::size_t> count(C, 0);
  const double* g = logit_grad.data().data();
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b].labels.size() != P) throw nd::ShapeError("group_gradients labels", {P}, {labels[b].labels.size()});
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t c = labels[b].labels[p];
      if (c >= C) throw std::out_of_range("group_gradients: label out of range");
      double mag = 0.0;
      for (std::size_t k = 0; k < C; ++k) mag += std::abs(g[(b * P + p) * C + k]);
      total[c] += mag;
      ++count[c];
    }
  }
  if (agg == GradAggregation::kMean) {
    for (std::size_t c = 0; c < C; ++c) {
      if (count[c]) total[c] /= static_cast<double>(count[c]);
    }
  }
  const double top = *std::max_element(total.begin(), total.end());
  if (top > 0.0) {
    for (auto& v : total) v /= top;
  }
  return total;
}

std::vector<double> grad_per_class(const seg::SegParams& params, const nd::Tensor& images,
                                   std::span<const world::LabelMap> labels, const SegLoss& loss,
                                   GradAggregation agg) {
  const seg::SegOutput out = seg::forward(params, images);
  nd::Tensor value = loss(out);
  value.backward();
  for (auto p : params.tensors()) p.zero_grad();
  if (!out.logits.has_grad()) return std::vector<double>(params.config.classes, 0.0);
  const auto g = out.logits.grad();
  return group_gradients(nd::Tensor::from(out.logits.shape(), {g.begin(), g.end()}), labels, agg);
}

double nonzero_std(std::span<const double> values) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (double v : values) {
    if (v == 0.0) continue;
    sum += v;
    sq += v * v;
    ++n;
  }
  if (n == 0) return 0.0;
  const double mean = sum / static_cast<double>(n);
  return std::sqrt(std::max(0.0, sq / static_cast<double>(n) - mean * mean));
}

std::vector<world::LabelMap> predict_labels(const nd::Tensor& probs) {
  std::vector<world::LabelMap> out;
  for (std::size_t b = 0; b < probs.shape()[0]; ++b) out.push_back(seg::argmax_labels(probs, b));
  return out;
}

}  // namespace comal::eval
