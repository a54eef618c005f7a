#include "comal/bimal/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>

#include "comal/ndgrad/ops.hpp"
#include "comal/ndgrad/optim.hpp"
#include "comal/ndgrad/random.hpp"

namespace comal::bimal {

namespace {

nd::Tensor uniform_tensor(nd::Shape shape, double bound, Rng& rng) {
  std::vector<double> v(nd::numel_of(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return nd::Tensor::from(std::move(shape), std::move(v), true);
}

Perceptron make_perceptron(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng,
                           bool zero_output) {
  Perceptron p;
  const double b1 = 1.0 / std::sqrt(static_cast<double>(in));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  p.w1 = uniform_tensor({in, hidden}, b1, rng);
  p.b1 = uniform_tensor({hidden}, b1, rng);
  if (zero_output) {
    p.w2 = nd::Tensor::zeros({hidden, out}, true);
    p.b2 = nd::Tensor::zeros({out}, true);
  } else {
    p.w2 = uniform_tensor({hidden, out}, b2, rng);
    p.b2 = uniform_tensor({out}, b2, rng);
  }
  return p;
}

void check_finite(const nd::Tensor& t, const std::string& layer) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw std::runtime_error("flow: non-finite output in " + layer);
  }
}

nd::Tensor as_batch(const nd::Tensor& v, std::size_t d) {
  if (v.rank() == 1 && v.shape()[0] == d) return nd::reshape(v, {1, d});
  if (v.rank() == 2 && v.shape()[1] == d) return v;
  throw nd::ShapeError("flow", v.shape(), {d});
}

}  // namespace

nd::Tensor Perceptron::operator()(const nd::Tensor& x) const {
  return nd::matmul(nd::tanh(nd::matmul(x, w1) + b1), w2) + b2;
}

FlowModel::FlowModel(const FlowConfig& cfg, std::uint64_t seed, FlowInit init) : cfg_(cfg) {
  if (cfg.dim < 2) throw std::invalid_argument("FlowModel: dimension must be >= 2");
  const std::size_t d = cfg.dim;
  log_scale_ = nd::Tensor::zeros({d}, true);
  bias_ = nd::Tensor::zeros({d}, true);
  Rng rng = Rng(seed).split(0xf10);
  Rng perm_rng = Rng(cfg.permutation_seed).split(0x9e);
  if (init == FlowInit::kRandom) {
    for (auto& x : log_scale_.mutable_data()) x = rng.uniform(-0.3, 0.3);
    for (auto& x : bias_.mutable_data()) x = rng.uniform(-0.3, 0.3);
  }
  for (std::size_t k = 0; k < cfg.layers; ++k) {
    CouplingLayer layer;
    const std::size_t parity = k % 2;
    for (std::size_t i = 0; i < d; ++i) {
      (i % 2 == parity ? layer.pass : layer.transformed).push_back(i);
    }
    const bool zero_out = init == FlowInit::kIdentity;
    layer.scale = make_perceptron(layer.pass.size(), cfg.hidden, layer.transformed.size(), rng,
                                  zero_out);
    layer.shift = make_perceptron(layer.pass.size(), cfg.hidden, layer.transformed.size(), rng,
                                  zero_out);
    layer.permutation.resize(d);
    std::iota(layer.permutation.begin(), layer.permutation.end(), 0);
    for (std::size_t i = d; i-- > 1;) {
      std::swap(layer.permutation[i], layer.permutation[perm_rng.below(i + 1)]);
    }
    // Position of each original index inside concat(pass, transformed).
    std::vector<std::size_t> pos(d);
    for (std::size_t i = 0; i < layer.pass.size(); ++i) pos[layer.pass[i]] = i;
    for (std::size_t i = 0; i < layer.transformed.size(); ++i) {
      pos[layer.transformed[i]] = layer.pass.size() + i;
    }
    layer.gather.resize(d);
    for (std::size_t j = 0; j < d; ++j) layer.gather[j] = pos[layer.permutation[j]];
    layers_.push_back(std::move(layer));
  }
}

nd::Tensor FlowModel::clamp_scale(const nd::Tensor& raw) const {
  if (cfg_.scale_clamp <= 0.0) return raw;
  return nd::tanh(raw * (1.0 / cfg_.scale_clamp)) * cfg_.scale_clamp;
}

FlowModel::Result FlowModel::forward(const nd::Tensor& v) const {
  nd::Tensor x = as_batch(v, cfg_.dim);
  const std::size_t B = x.shape()[0];
  x = x * nd::exp(log_scale_) + bias_;
  check_finite(x, "elementwise affine");
  nd::Tensor logdet = nd::Tensor::full({B}, 0.0) + nd::sum(log_scale_);
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const auto& L = layers_[k];
    nd::Tensor a = nd::index_select(x, 1, L.pass);
    nd::Tensor b = nd::index_select(x, 1, L.transformed);
    nd::Tensor s = clamp_scale(L.scale(a));
    nd::Tensor t = L.shift(a);
    b = b * nd::exp(s) + t;
    x = nd::index_select(nd::concat({a, b}, 1), 1, L.gather);
    logdet = logdet + nd::sum(s, 1);
    check_finite(x, "coupling " + std::to_string(k));
  }
  return {x, logdet};
}

nd::Tensor FlowModel::inverse(const nd::Tensor& z) const {
  nd::NoGradGuard no_grad;
  nd::Tensor x = as_batch(z, cfg_.dim);
  const std::size_t d = cfg_.dim;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    const auto& L = layers_[k];
    // Undo the shuffle, then split.
    std::vector<std::size_t> inv(d);
    for (std::size_t j = 0; j < d; ++j) inv[L.gather[j]] = j;
    nd::Tensor cat = nd::index_select(x, 1, inv);
    nd::Tensor a = nd::slice(cat, 1, 0, L.pass.size());
    nd::Tensor b = nd::slice(cat, 1, L.pass.size(), d);
    nd::Tensor s = clamp_scale(L.scale(a));
    nd::Tensor t = L.shift(a);
    b = (b - t) * nd::exp(-s);
    std::vector<std::size_t> order(d);
    for (std::size_t i = 0; i < L.pass.size(); ++i) order[L.pass[i]] = i;
    for (std::size_t i = 0; i < L.transformed.size(); ++i) {
      order[L.transformed[i]] = L.pass.size() + i;
    }
    x = nd::index_select(nd::concat({a, b}, 1), 1, order);
    check_finite(x, "inverse coupling " + std::to_string(k));
  }
  return (x - bias_) * nd::exp(-log_scale_);
}

std::vector<nd::Tensor> FlowModel::parameters() const {
  std::vector<nd::Tensor> out{log_scale_, bias_};
  for (const auto& L : layers_) {
    for (const auto* p : {&L.scale, &L.shift}) {
      out.insert(out.end(), {p->w1, p->b1, p->w2, p->b2});
    }
  }
  return out;
}

nd::NamedTensors FlowModel::named() const {
  nd::NamedTensors out{{"flow.log_scale", log_scale_}, {"flow.bias", bias_}};
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const auto& L = layers_[k];
    const std::string base = "flow.coupling" + std::to_string(k);
    for (const auto& [tag, p] : {std::pair{".scale", &L.scale}, std::pair{".shift", &L.shift}}) {
      out.emplace_back(base + tag + ".w1", p->w1);
      out.emplace_back(base + tag + ".b1", p->b1);
      out.emplace_back(base + tag + ".w2", p->w2);
      out.emplace_back(base + tag + ".b2", p->b2);
    }
  }
  return out;
}

void FlowModel::load(const nd::NamedTensors& named) {
  auto mine = this->named();
  for (auto& [name, dst] : mine) {
    auto it = std::find_if(named.begin(), named.end(),
                           [&](const auto& e) { return e.first == name; });
    if (it == named.end()) throw std::runtime_error("FlowModel::load: missing " + name);
    if (it->second.shape() != dst.shape()) {
      throw nd::ShapeError("FlowModel::load(" + name + ")", dst.shape(), it->second.shape());
    }
    std::copy(it->second.data().begin(), it->second.data().end(), dst.mutable_data().begin());
  }
}

FlowModel FlowModel::clone() const {
  FlowModel copy = *this;
  copy.log_scale_ = log_scale_.clone();
  copy.bias_ = bias_.clone();
  for (auto& L : copy.layers_) {
    for (auto* p : {&L.scale, &L.shift}) {
      p->w1 = p->w1.clone();
      p->b1 = p->b1.clone();
      p->w2 = p->w2.clone();
      p->b2 = p->b2.clone();
    }
  }
  return copy;
}

nd::Tensor prior_logprob(const nd::Tensor& z) {
  nd::Tensor zb = z.rank() == 1 ? nd::reshape(z, {1, z.shape()[0]}) : z;
  const double d = static_cast<double>(zb.shape()[1]);
  const double c = -0.5 * d * std::log(2.0 * std::numbers::pi);
  return nd::sum(zb * zb, 1) * -0.5 + c;
}

nd::Tensor nll(const FlowModel& model, const nd::Tensor& v) {
  const auto r = model.forward(v);
  return -(prior_logprob(r.z) + r.logdet);
}

double mean_nll(const FlowModel& model, const nd::Tensor& data) {
  nd::NoGradGuard no_grad;
  const auto per_row = nll(model, data);
  double s = 0.0;
  for (double v : per_row.data()) s += v;
  return s / static_cast<double>(per_row.numel());
}

FlowTrainReport train_flow(FlowModel& model, const nd::Tensor& data,
                           const FlowTrainOptions& opts) {
  if (data.rank() != 2 || data.shape()[1] != model.dim() || data.shape()[0] == 0) {
    throw nd::ShapeError("train_flow", data.shape(), {0, model.dim()});
  }
  FlowTrainReport report;
  if (opts.epochs == 0) return report;
  const std::size_t M = data.shape()[0], d = model.dim();
  if (opts.data_init) {
    // Standardize each dimension: v * exp(ls) + b has zero mean, unit variance.
    auto ls = model.log_scale().mutable_data();
    auto bias = model.bias().mutable_data();
    for (std::size_t j = 0; j < d; ++j) {
      double mean = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < M; ++i) mean += data.data()[i * d + j];
      mean /= static_cast<double>(M);
      for (std::size_t i = 0; i < M; ++i) {
        const double e = data.data()[i * d + j] - mean;
        sq += e * e;
      }
      const double sd = std::sqrt(sq / static_cast<double>(M) + opts.variance_floor);
      ls[j] = -std::log(sd);
      bias[j] = -mean / sd;
    }
  }
  nd::AdamOptions ao;
  ao.lr = opts.lr;
  ao.weight_decay = opts.weight_decay;
  ao.clip_norm = 100.0;
  nd::Adam adam(model.parameters(), ao);
  Rng rng = Rng(opts.seed).split(0x7f10);
  std::vector<std::size_t> order(M);
  std::iota(order.begin(), order.end(), 0);
  std::size_t iteration = 0;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    for (std::size_t i = M; i-- > 1;) std::swap(order[i], order[rng.below(i + 1)]);
    double total = 0.0;
    for (std::size_t start = 0; start < M; start += opts.batch) {
      const std::size_t end = std::min(M, start + opts.batch);
      std::vector<std::size_t> rows(order.begin() + static_cast<long>(start),
                                    order.begin() + static_cast<long>(end));
      nd::Tensor batch = nd::index_select(data, 0, rows);
      nd::Tensor loss = nd::mean(nll(model, batch));
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw std::runtime_error("train_flow: diverged at iteration " + std::to_string(iteration));
      }
      total += value * static_cast<double>(end - start);
      loss.backward();
      adam.step();
      ++iteration;
    }
    report.epoch_nll.push_back(total / static_cast<double>(M));
  }
  return report;
}

}  // namespace comal::bimal
