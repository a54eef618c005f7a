#include "comal/ndgrad/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace comal::nd {

namespace {

void check_finite_grads(const std::vector<Tensor>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (double g : params[i].grad()) {
      if (!std::isfinite(g)) {
        throw std::runtime_error("optimizer: non-finite gradient in parameter #" +
                                 std::to_string(i));
      }
    }
  }
}

}  // namespace

void sgd_update(std::span<double> param, std::span<const double> grad,
                std::span<double> velocity, const SgdOptions& opts) {
  if (param.size() != velocity.size() || (!grad.empty() && grad.size() != param.size())) {
    throw ShapeError("sgd_update: parameter/gradient/velocity sizes disagree");
  }
  for (double g : grad) {
    if (!std::isfinite(g)) throw std::runtime_error("sgd_update: non-finite gradient");
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.empty() ? 0.0 : grad[i];
    velocity[i] = opts.momentum * velocity[i] + g + opts.weight_decay * param[i];
    param[i] -= opts.lr * velocity[i];
  }
}

Sgd::Sgd(std::vector<Tensor> params, SgdOptions opts)
    : params_(std::move(params)), opts_(opts) {
  for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
}

void Sgd::step() {
  check_finite_grads(params_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    sgd_update(params_[i].mutable_data(), params_[i].grad(), velocity_[i], opts_);
  }
  zero_grad();
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Adam::Adam(std::vector<Tensor> params, AdamOptions opts)
    : params_(std::move(params)), opts_(opts) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  check_finite_grads(params_);
  double scale = 1.0;
  if (opts_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& p : params_) {
      for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > opts_.clip_norm) scale = opts_.clip_norm / norm;
  }
  ++t_;
  const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto data = params_[i].mutable_data();
    const auto grad = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = (grad.empty() ? 0.0 : grad[j] * scale) + opts_.weight_decay * data[j];
      m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * g;
      v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * g * g;
      data[j] -= opts_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + opts_.eps);
    }
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace comal::nd
