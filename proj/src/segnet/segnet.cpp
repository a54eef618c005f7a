#include "comal/segnet/segnet.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "comal/ndgrad/ops.hpp"
#include "comal/ndgrad/random.hpp"

namespace comal::seg {

namespace {

std::array<nd::Shape, 4> weight_shapes(const SegConfig& cfg) {
  const auto [w1, w2, w3] = cfg.widths;
  return {{{w1, 3, 3, 3}, {w2, w1, 3, 3}, {w3, w2, 3, 3}, {cfg.classes, w3, 1, 1}}};
}

void check_finite(const nd::Tensor& t, const char* layer) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("segnet: non-finite activation in layer ") + layer);
    }
  }
}

}  // namespace

std::vector<nd::Tensor> SegParams::tensors() const {
  std::vector<nd::Tensor> out;
  for (std::size_t i = 0; i < 4; ++i) {
    out.push_back(weights[i]);
    out.push_back(biases[i]);
  }
  return out;
}

nd::NamedTensors SegParams::named() const {
  nd::NamedTensors out;
  for (std::size_t i = 0; i < 4; ++i) {
    out.emplace_back("seg.conv" + std::to_string(i + 1) + ".weight", weights[i]);
    out.emplace_back("seg.conv" + std::to_string(i + 1) + ".bias", biases[i]);
  }
  return out;
}

void SegParams::load(const nd::NamedTensors& named) {
  const auto mine = this->named();
  for (std::size_t i = 0; i < mine.size(); ++i) {
    bool found = false;
    for (const auto& [name, t] : named) {
      if (name != mine[i].first) continue;
      if (t.shape() != mine[i].second.shape()) {
        throw nd::ShapeError("SegParams::load(" + name + ")", mine[i].second.shape(), t.shape());
      }
      nd::Tensor fresh = nd::Tensor::from(t.shape(), {t.data().begin(), t.data().end()}, true);
      if (i % 2 == 0) {
        weights[i / 2] = fresh;
      } else {
        biases[i / 2] = fresh;
      }
      found = true;
    }
    if (!found) throw std::runtime_error("SegParams::load: missing " + mine[i].first);
  }
}

SegParams SegParams::clone() const {
  SegParams p;
  p.config = config;
  for (std::size_t i = 0; i < 4; ++i) {
    p.weights[i] = weights[i].clone();
    p.biases[i] = biases[i].clone();
  }
  return p;
}

SegParams init(std::uint64_t seed, const SegConfig& cfg) {
  SegParams p;
  p.config = cfg;
  Rng rng = Rng(seed).split(0x5e6);
  const auto shapes = weight_shapes(cfg);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& s = shapes[i];
    const double fan_in = static_cast<double>(s[1] * s[2] * s[3]);
    const double bound = 1.0 / std::sqrt(fan_in);
    std::vector<double> w(nd::numel_of(s));
    for (auto& v : w) v = rng.uniform(-bound, bound);
    std::vector<double> b(s[0]);
    for (auto& v : b) v = rng.uniform(-bound, bound);
    p.weights[i] = nd::Tensor::from(s, std::move(w), true);
    p.biases[i] = nd::Tensor::from({s[0]}, std::move(b), true);
  }
  return p;
}

SegParams zeros(const SegConfig& cfg) {
  SegParams p;
  p.config = cfg;
  const auto shapes = weight_shapes(cfg);
  for (std::size_t i = 0; i < 4; ++i) {
    p.weights[i] = nd::Tensor::zeros(shapes[i], true);
    p.biases[i] = nd::Tensor::zeros({shapes[i][0]}, true);
  }
  return p;
}

nd::Tensor images_to_tensor(std::span<const world::Image* const> images) {
  if (images.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
  const std::size_t H = images[0]->height, W = images[0]->width;
  std::vector<double> data(images.size() * 3 * H * W);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const auto& img = *images[b];
    if (img.height != H || img.width != W) {
      throw nd::ShapeError("images_to_tensor", {H, W}, {img.height, img.width});
    }
    for (std::size_t p = 0; p < H * W; ++p) {
      for (std::size_t c = 0; c < 3; ++c) data[((b * 3 + c) * H * W) + p] = img.rgb[p * 3 + c];
    }
  }
  return nd::Tensor::from({images.size(), 3, H, W}, std::move(data));
}

nd::Tensor image_to_tensor(const world::Image& image) {
  const world::Image* one[] = {&image};
  return images_to_tensor(one);
}

SegOutput forward(const SegParams& params, const nd::Tensor& images) {
  if (images.rank() != 4 || images.shape()[1] != 3) {
    throw nd::ShapeError("segnet forward expects [B,3,H,W], got " + nd::shape_str(images.shape()));
  }
  static constexpr const char* kLayers[] = {"conv1", "conv2", "conv3", "classifier"};
  nd::Tensor h = images;
  for (std::size_t i = 0; i < 3; ++i) {
    h = nd::tanh(nd::conv2d(h, params.weights[i], params.biases[i], 1));
    check_finite(h, kLayers[i]);
  }
  h = nd::conv2d(h, params.weights[3], params.biases[3], 0);
  check_finite(h, kLayers[3]);
  SegOutput out;
  out.logits = nd::permute(h, {0, 2, 3, 1});
  out.log_probs = nd::log_softmax(out.logits, -1);
  out.probs = nd::softmax(out.logits, -1);
  return out;
}

world::LabelMap argmax_labels(const nd::Tensor& probs, std::size_t item) {
  const auto& s = probs.shape();
  if (s.size() != 4 || item >= s[0]) {
    throw nd::ShapeError("argmax_labels: bad map shape " + nd::shape_str(s));
  }
  const std::size_t H = s[1], W = s[2], C = s[3];
  world::LabelMap out(H, W);
  const double* p = probs.data().data() + item * H * W * C;
  for (std::size_t i = 0; i < H * W; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (p[i * C + c] > p[i * C + best]) best = c;
    }
    out.labels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace comal::seg
