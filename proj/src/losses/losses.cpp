#include "comal/losses/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "comal/ndgrad/ops.hpp"

namespace comal::losses {

std::size_t PseudoLabelMap::ignored() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), kIgnore));
}

PseudoLabelMap as_targets(const world::LabelMap& labels) {
  return {labels.height, labels.width, labels.labels};
}

std::vector<PseudoLabelMap> as_targets(std::span<const world::LabelMap> labels) {
  std::vector<PseudoLabelMap> out;
  out.reserve(labels.size());
  for (const auto& l : labels) out.push_back(as_targets(l));
  return out;
}

nd::Tensor nll_loss(const nd::Tensor& log_probs, std::span<const PseudoLabelMap> targets,
                    std::span<const double> weights) {
  const auto& s = log_probs.shape();
  if (s.size() != 4 || s[0] != targets.size()) {
    throw nd::ShapeError("cross_entropy expects [B,H,W,C] with one target per map, got " +
                         nd::shape_str(s));
  }
  const std::size_t B = s[0], P = s[1] * s[2], C = s[3];
  if (!weights.empty() && weights.size() != C) {
    throw nd::ShapeError("cross_entropy weights", {C}, {weights.size()});
  }
  std::size_t count = 0;
  for (const auto& t : targets) {
    if (t.height != s[1] || t.width != s[2]) {
      throw nd::ShapeError("cross_entropy targets", {s[1], s[2]}, {t.height, t.width});
    }
    count += P - t.ignored();
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: every pixel is ignored");
  std::vector<double> w(B * P * C, 0.0);
  const double norm = 1.0 / static_cast<double>(count);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t p = 0; p < P; ++p) {
      const std::uint8_t t = targets[b].labels[p];
      if (t == kIgnore) continue;
      if (t >= C) throw std::out_of_range("cross_entropy: label out of range");
      w[(b * P + p) * C + t] = (weights.empty() ? 1.0 : weights[t]) * norm;
    }
  }
  return -nd::sum(log_probs * nd::Tensor::from(s, std::move(w)));
}

nd::Tensor cross_entropy(const nd::Tensor& probs, std::span<const PseudoLabelMap> targets,
                         std::span<const double> weights) {
  return nll_loss(nd::log(probs), targets, weights);
}

nd::Tensor cross_entropy(const nd::Tensor& probs, std::span<const world::LabelMap> labels,
                         std::span<const double> weights) {
  const auto t = as_targets(labels);
  return cross_entropy(probs, t, weights);
}

nd::Tensor entropy_loss(const nd::Tensor& y) {
  if (y.rank() < 1 || y.shape().back() < 2) {
    throw nd::ShapeError("entropy_loss needs a class axis of size >= 2, got " +
                         nd::shape_str(y.shape()));
  }
  const double C = static_cast<double>(y.shape().back());
  return nd::sum(y * nd::log(y)) * (-1.0 / std::log(C));
}

nd::Tensor entropy_loss_mean(const nd::Tensor& y) {
  const double pixels = static_cast<double>(y.numel() / y.shape().back());
  return entropy_loss(y) * (1.0 / pixels);
}

std::vector<double> uniform_distribution(std::size_t classes) {
  if (classes == 0) throw std::invalid_argument("uniform_distribution: no classes");
  return std::vector<double>(classes, 1.0 / static_cast<double>(classes));
}

namespace {

void check_simplex(std::span<const double> p, const char* what) {
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument(std::string(what) + ": entries must be finite and >= 0");
    }
    total += v;
  }
  if (p.empty() || std::abs(total - 1.0) > 1e-6) {
    throw std::invalid_argument(std::string(what) + ": entries must sum to 1");
  }
}

}  // namespace

std::vector<double> class_weights(std::span<const double> q, std::span<const double> qprime,
                                  double clamp) {
  check_simplex(q, "class_weights(q)");
  std::vector<double> ideal = qprime.empty() ? uniform_distribution(q.size())
                                             : std::vector<double>(qprime.begin(), qprime.end());
  check_simplex(ideal, "class_weights(q')");
  if (ideal.size() != q.size()) throw nd::ShapeError("class_weights", {q.size()}, {ideal.size()});
  if (!(clamp > 0.0)) throw std::invalid_argument("class_weights: clamp must be positive");
  std::vector<double> w(q.size());
  for (std::size_t c = 0; c < q.size(); ++c) {
    w[c] = std::min(ideal[c] / std::max(q[c], 1e-6), clamp);
  }
  return w;
}

std::vector<PseudoLabelMap> pseudo_labels(const nd::Tensor& probs, double threshold) {
  if (!(threshold >= 0.5 && threshold < 1.0)) {
    throw std::invalid_argument("pseudo_labels: threshold must lie in [0.5, 1)");
  }
  const auto& s = probs.shape();
  if (s.size() != 4) throw nd::ShapeError("pseudo_labels expects [B,H,W,C], got " + nd::shape_str(s));
  const std::size_t B = s[0], P = s[1] * s[2], C = s[3];
  std::vector<PseudoLabelMap> out(B, PseudoLabelMap{s[1], s[2], std::vector<std::uint8_t>(P)});
  const double* p = probs.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < P; ++i) {
      const double* row = p + (b * P + i) * C;
      const auto best = std::max_element(row, row + C);
      out[b].labels[i] = *best >= threshold ? static_cast<std::uint8_t>(best - row) : kIgnore;
    }
  }
  return out;
}

ObjectiveTerms objective_bimal(const seg::SegOutput& source,
                               std::span<const world::LabelMap> source_labels,
                               const seg::SegOutput& target, const nd::Tensor& target_images,
                               const bimal::FlowModel& flow, const LossConfig& cfg) {
  ObjectiveTerms t;
  const auto targets = as_targets(source_labels);
  nd::Tensor ce = nll_loss(source.log_probs, targets);
  t.ce_source = ce.item();
  t.total = ce;
  if (cfg.lambda_bimal != 0.0) {
    const auto terms = bimal::bimal_terms(flow, target_images, target.probs, cfg.bimal);
    nd::Tensor nll = nd::mean(terms.nll);
    nd::Tensor tau = nd::mean(terms.tau);
    t.nll = nll.item();
    t.tau = tau.item();
    t.total = t.total + (nll + tau) * cfg.lambda_bimal;
  }
  return t;
}

nd::Tensor to_struct_grid(const nd::Tensor& probs, const costruct::StructConfig& cfg) {
  const auto& s = probs.shape();
  if (s.size() != 4 || s[1] % cfg.height != 0 || s[2] % cfg.width != 0 ||
      s[1] / cfg.height != s[2] / cfg.width) {
    throw nd::ShapeError("prediction grid does not reduce to the structure grid", s,
                         {0, cfg.height, cfg.width, cfg.classes});
  }
  return bimal::subsample_map(probs, s[1] / cfg.height);
}

ObjectiveTerms objective_comal(const seg::SegOutput& source,
                               std::span<const world::LabelMap> source_labels,
                               const seg::SegOutput& target, const costruct::StructNet& net,
                               std::span<const double> q_source, const LossConfig& cfg,
                               std::uint64_t seed) {
  ObjectiveTerms t;
  const std::size_t C = source.log_probs.shape()[3];
  const std::vector<double> w = cfg.class_balanced
                                    ? class_weights(q_source, cfg.qprime, cfg.weight_clamp)
                                    : std::vector<double>(C, 1.0);
  nd::Tensor ce_s = nll_loss(source.log_probs, as_targets(source_labels), w);
  t.ce_source = ce_s.item();
  t.total = ce_s;
  const auto pseudo = pseudo_labels(target.probs, cfg.pseudo_threshold);
  std::size_t kept = 0;
  for (const auto& p : pseudo) kept += p.labels.size() - p.ignored();
  if (kept == 0) {
    t.target_skipped = true;
  } else {
    nd::Tensor ce_t = nll_loss(target.log_probs, pseudo, w);
    t.ce_target = ce_t.item();
    t.total = t.total + ce_t;
  }
  if (cfg.lambda_comal != 0.0) {
    nd::Tensor cs = costruct::comal_loss(net, to_struct_grid(source.probs, net.config),
                                         cfg.comal_anchors, seed);
    nd::Tensor ct = costruct::comal_loss(net, to_struct_grid(target.probs, net.config),
                                         cfg.comal_anchors, seed ^ 0x7a5d);
    t.comal_source = cs.item();
    t.comal_target = ct.item();
    t.total = t.total + (cs + ct) * cfg.lambda_comal;
  }
  return t;
}

}  // namespace comal::losses
