#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "comal/ndgrad/serialize.hpp"
#include "comal/ndgrad/tensor.hpp"
#include "comal/synthworld/world.hpp"

namespace comal::seg {

struct SegConfig {
  std::size_t classes = world::kNumClasses;
  std::array<std::size_t, 3> widths = {16, 32, 32};
};

/// Three 3x3 conv + tanh blocks followed by a 1x1 conv to class logits.
struct SegParams {
  SegConfig config;
  std::array<nd::Tensor, 4> weights;
  std::array<nd::Tensor, 4> biases;

  std::vector<nd::Tensor> tensors() const;
  nd::NamedTensors named() const;
  void load(const nd::NamedTensors& named);
  SegParams clone() const;
};

/// Fan-in scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
SegParams init(std::uint64_t seed, const SegConfig& cfg = {});
/// All-zero parameters (uniform predictions).
SegParams zeros(const SegConfig& cfg = {});

/// Network output for a batch. All tensors are [B, H, W, C].
struct SegOutput {
  nd::Tensor logits;
  nd::Tensor log_probs;
  nd::Tensor probs;
};

/// Packs images into a [B, 3, H, W] tensor.
nd::Tensor images_to_tensor(std::span<const world::Image* const> images);
nd::Tensor image_to_tensor(const world::Image& image);

/// Forward pass. `images` is [B, 3, H, W]. Raises std::runtime_error naming
/// the layer if an activation turns non-finite.
SegOutput forward(const SegParams& params, const nd::Tensor& images);

/// Hard argmax labels of one batch item of a [B, H, W, C] map.
world::LabelMap argmax_labels(const nd::Tensor& probs, std::size_t item);

}  // namespace comal::seg
