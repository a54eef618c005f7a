#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace comal::world {

inline constexpr std::size_t kNumClasses = 8;

enum class SemanticClass : std::uint8_t {
  kSky = 0,
  kBuilding = 1,
  kRoad = 2,
  kSidewalk = 3,
  kVehicle = 4,
  kPedestrian = 5,
  kPole = 6,
  kSign = 7,
};

std::string_view class_name(std::size_t c);
/// The rare classes whose frequency the tail knob controls.
inline constexpr std::array<std::size_t, 3> kTailClasses = {5, 6, 7};

/// Hard per-pixel class indices, row-major.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), labels(h * w, fill) {}

  std::uint8_t at(std::size_t r, std::size_t c) const { return labels[r * width + c]; }
  std::uint8_t& at(std::size_t r, std::size_t c) { return labels[r * width + c]; }
  std::size_t size() const { return labels.size(); }
  bool operator==(const LabelMap&) const = default;
};

/// H x W x 3 image, row-major, channels last, values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> rgb;

  bool operator==(const Image&) const = default;
};

enum class Domain { kSource, kTarget };
std::string_view domain_name(Domain d);
Domain parse_domain(std::string_view s);

struct DomainSample {
  Image image;
  LabelMap labels;
  Domain domain = Domain::kSource;
  std::uint64_t seed = 0;
};

struct RenderParams {
  double hue_shift_deg = 0.0;
  double brightness = 0.0;
  double noise_sigma = 0.03;
};

struct WorldConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  /// Scales the expected pixel counts of pedestrian, pole and sign.
  double tail_lambda = 1.0;
  RenderParams source{0.0, 0.0, 0.03};
  RenderParams target{50.0, -0.08, 0.08};

  void validate() const;
  /// Stable textual form, hashed into dataset manifests.
  std::string canonical() const;
  std::string hash() const;
};

/// Base color of each class before the domain transform.
const std::array<std::array<double, 3>, kNumClasses>& base_colors();

/// Renders a structured street scene. Label geometry depends only on
/// (seed, cfg); appearance additionally depends on the domain.
DomainSample generate(std::uint64_t seed, Domain domain, const WorldConfig& cfg);

/// Labels of the scene that generate() would produce for this seed.
LabelMap generate_labels(std::uint64_t seed, const WorldConfig& cfg);

struct Violation {
  std::string rule;
  std::size_t row = 0;
  std::size_t col = 0;
};

/// Checks the scene grammar. Each violated rule is reported once, with its
/// first witness pixel in raster order. Rules:
///   "no sky band", "no road band", "band order", "road not bordered by
///   sidewalk", "vehicle off road", "pedestrian off sidewalk",
///   "pole not rooted", "pole too wide", "sign not on pole", "sign too large".
std::vector<Violation> validate_structure(const LabelMap& labels);

/// Pixel frequencies over a dataset; sums to one.
std::vector<double> class_histogram(const std::vector<LabelMap>& dataset);

/// Keeps every `stride`-th row and column starting at 0.
LabelMap subsample(const LabelMap& labels, std::size_t stride);

// Dataset files: <dir>/manifest.json, <dir>/images.ndg ([N,H,W,3]) and
// <dir>/labels.ndg ([N,H,W]).
struct Dataset {
  WorldConfig config;
  Domain domain = Domain::kSource;
  std::vector<DomainSample> samples;

  std::vector<LabelMap> label_maps() const;
};

Dataset generate_dataset(std::uint64_t first_seed, std::size_t count, Domain domain,
                         const WorldConfig& cfg);
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace comal::world
