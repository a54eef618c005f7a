#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "comal/ndgrad/serialize.hpp"
#include "comal/ndgrad/tensor.hpp"
#include "comal/synthworld/world.hpp"

namespace comal::costruct {

struct StructConfig {
  std::size_t classes = world::kNumClasses;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t embed = 64;
  std::size_t blocks = 4;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 128;

  std::size_t tokens() const { return height * width; }
  void validate() const;
};

/// 1 = unknown (masked), 0 = known.
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> masked;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w, std::uint8_t fill = 1)
      : height(h), width(w), masked(h * w, fill) {}
  std::size_t count() const;
  bool operator==(const BinaryMask&) const = default;
};

enum class MaskScheme { kUniformRate, kSingleKnown, kAllMasked };

/// Deterministic in (seed, H, W, scheme). Uniform-rate masks each position
/// with probability rho ~ U[0.15, 1] and always mask at least one.
BinaryMask sample_mask(std::uint64_t seed, std::size_t height, std::size_t width,
                       MaskScheme scheme);
/// Everything masked except `anchor`.
BinaryMask single_known_mask(std::size_t height, std::size_t width, std::size_t anchor);

struct Block {
  nd::Tensor ln1_gain, ln1_bias;
  nd::Tensor wq, wk, wv, wo, bo;
  nd::Tensor ln2_gain, ln2_bias;
  nd::Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

/// Masked multi-head attention model of per-pixel class distributions
/// given the known pixels. Token C of the embedding table is the mask token.
struct StructNet {
  StructConfig config;
  nd::Tensor token_embedding;     // [C + 1, E]
  nd::Tensor position_embedding;  // [N, E]
  std::vector<Block> blocks;
  nd::Tensor final_gain, final_bias;
  nd::Tensor out_weight, out_bias;  // [E, C], [C]

  std::vector<nd::Tensor> parameters() const;
  nd::NamedTensors named() const;
  void load(const nd::NamedTensors& named);
  StructNet clone() const;
};

StructNet init_structnet(std::uint64_t seed, const StructConfig& cfg);

/// Per-position class content [B, N, C] for hard labels (one-hot rows).
nd::Tensor label_content(std::span<const world::LabelMap> labels, std::size_t classes);

/// Log class probabilities [B, N, C]. `content` is [B, N, C] (one-hot or
/// soft); content at masked positions never reaches the network.
nd::Tensor forward_log_probs(const StructNet& net, const nd::Tensor& content,
                             std::span<const BinaryMask> masks);

/// Per-position distributions [N, C] for a single map.
nd::Tensor forward(const StructNet& net, const world::LabelMap& labels, const BinaryMask& mask);
/// Soft map y: [H, W, C].
nd::Tensor forward(const StructNet& net, const nd::Tensor& y, const BinaryMask& mask);

/// Mean of -log p(label) over masked positions; batch mean for several maps.
nd::Tensor masked_nll(const StructNet& net, std::span<const world::LabelMap> labels,
                      std::span<const BinaryMask> masks);
double masked_nll(const StructNet& net, const world::LabelMap& labels, const BinaryMask& mask);
/// Same reduction applied to given log-probabilities [B, N, C].
nd::Tensor masked_nll_from(const nd::Tensor& log_probs, std::span<const world::LabelMap> labels,
                           std::span<const BinaryMask> masks);

struct StructTrainOptions {
  std::size_t epochs = 30;
  std::size_t batch = 16;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  double single_known_rate = 0.1;
  double all_masked_rate = 0.1;
};

struct StructTrainReport {
  std::vector<double> epoch_nll;
};

/// Fits the masked objective with fresh masks per draw (Adam).
StructTrainReport train_struct(StructNet& net, std::span<const world::LabelMap> labels,
                               const StructTrainOptions& opts);

/// Fixed evaluation masks for held-out scoring, one per map.
std::vector<BinaryMask> evaluation_masks(std::uint64_t seed, std::size_t count,
                                         std::size_t height, std::size_t width);
double mean_masked_nll(const StructNet& net, std::span<const world::LabelMap> labels,
                       std::span<const BinaryMask> masks);

/// Conditional likelihood loss of soft maps y [B, H, W, C]: for each anchor
/// i, everything except i is masked, the anchor carries soft content and the
/// masked positions are scored with soft targets -sum_c y_c log p_c. Averages
/// over anchors and batch. num_anchors >= N uses every anchor exactly once;
/// otherwise anchors are drawn without replacement from `seed`.
nd::Tensor comal_loss(const StructNet& net, const nd::Tensor& y, std::size_t num_anchors,
                      std::uint64_t seed);

/// Iterative decoding: forward, commit the most confident masked position
/// with a temperature-scaled draw, repeat. Known pixels are kept.
/// temperature <= 0 commits the argmax.
world::LabelMap sample(const StructNet& net, const BinaryMask& mask, const world::LabelMap& known,
                       double temperature, std::uint64_t seed);
/// Several independent samples decoded side by side; item i uses stream i of `seed`.
std::vector<world::LabelMap> sample_many(const StructNet& net, std::span<const BinaryMask> masks,
                                         std::span<const world::LabelMap> known,
                                         double temperature, std::uint64_t seed);

}  // namespace comal::costruct
