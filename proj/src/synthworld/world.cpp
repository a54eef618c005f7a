#include "comal/synthworld/world.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "comal/ndgrad/random.hpp"
#include "comal/ndgrad/serialize.hpp"
#include "json.hpp"

namespace comal::world {

namespace {

constexpr std::uint8_t kSky = 0, kBuilding = 1, kRoad = 2, kSidewalk = 3,
                       kVehicle = 4, kPedestrian = 5, kPole = 6, kSign = 7;

// Expected object counts per 32 columns at tail_lambda = 1.
constexpr double kPolesPer32 = 2.0;
constexpr double kPedestriansPer32 = 3.0;
constexpr double kVehiclesPer32 = 1.5;
constexpr double kSignProbability = 0.75;
constexpr std::size_t kPoleSpacing = 6;
constexpr std::size_t kMaxSignPixels = 6;

// Geometry is placed on an even lattice so that stride-2 subsampling keeps
// the scene grammar intact.
long even_in(Rng& rng, long lo, long hi) {
  const long elo = (lo + 1) / 2;
  const long ehi = hi / 2;
  if (ehi < elo) return 2 * elo;
  return 2 * rng.range(elo, ehi);
}

std::array<double, 3> hue_rotate(const std::array<double, 3>& c, double deg) {
  const double th = deg * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double k = 1.0 / 3.0, r = std::sqrt(1.0 / 3.0);
  // Rotation about the gray axis (1,1,1)/sqrt(3).
  const double m00 = cs + (1 - cs) * k, m01 = (1 - cs) * k - r * sn,
               m02 = (1 - cs) * k + r * sn;
  const double m10 = (1 - cs) * k + r * sn, m11 = cs + (1 - cs) * k,
               m12 = (1 - cs) * k - r * sn;
  const double m20 = (1 - cs) * k - r * sn, m21 = (1 - cs) * k + r * sn,
               m22 = cs + (1 - cs) * k;
  return {m00 * c[0] + m01 * c[1] + m02 * c[2], m10 * c[0] + m11 * c[1] + m12 * c[2],
          m20 * c[0] + m21 * c[1] + m22 * c[2]};
}

bool is_road_zone(std::uint8_t v) { return v == kRoad || v == kVehicle; }

int background_rank(std::uint8_t v) {
  switch (v) {
    case kSky:
      return 0;
    case kBuilding:
      return 1;
    case kSidewalk:
      return 2;
    case kRoad:
      return 3;
    default:
      return -1;
  }
}

}  // namespace

std::string_view class_name(std::size_t c) {
  static constexpr std::array<std::string_view, kNumClasses> names = {
      "sky", "building", "road", "sidewalk", "vehicle", "pedestrian", "pole", "sign"};
  if (c >= kNumClasses) throw std::out_of_range("class index " + std::to_string(c));
  return names[c];
}

std::string_view domain_name(Domain d) { return d == Domain::kSource ? "source" : "target"; }

Domain parse_domain(std::string_view s) {
  if (s == "source") return Domain::kSource;
  if (s == "target") return Domain::kTarget;
  throw std::invalid_argument("unknown domain '" + std::string(s) + "'");
}

void WorldConfig::validate() const {
  if (height < 8 || width < 8) {
    throw std::invalid_argument("WorldConfig: grid must be at least 8x8, got " +
                                std::to_string(height) + "x" + std::to_string(width));
  }
  if (!(tail_lambda >= 0.0 && tail_lambda <= 1.0)) {
    throw std::invalid_argument("WorldConfig: tail_lambda must lie in [0, 1]");
  }
  for (const auto* p : {&source, &target}) {
    if (!(p->noise_sigma >= 0.0)) throw std::invalid_argument("WorldConfig: negative noise");
  }
}

std::string WorldConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "h=" << height << ";w=" << width << ";lambda=" << tail_lambda
     << ";src=" << source.hue_shift_deg << ',' << source.brightness << ','
     << source.noise_sigma << ";tgt=" << target.hue_shift_deg << ',' << target.brightness
     << ',' << target.noise_sigma;
  return os.str();
}

std::string WorldConfig::hash() const {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char ch : canonical()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

const std::array<std::array<double, 3>, kNumClasses>& base_colors() {
  static const std::array<std::array<double, 3>, kNumClasses> colors = {{
      {0.55, 0.75, 0.95},  // sky
      {0.55, 0.42, 0.38},  // building
      {0.36, 0.36, 0.40},  // road
      {0.72, 0.68, 0.58},  // sidewalk
      {0.15, 0.25, 0.72},  // vehicle
      {0.88, 0.22, 0.28},  // pedestrian
      {0.92, 0.86, 0.20},  // pole
      {0.96, 0.52, 0.08},  // sign
  }};
  return colors;
}

LabelMap generate_labels(std::uint64_t seed, const WorldConfig& cfg) {
  cfg.validate();
  Rng rng = Rng(seed).split(0x1abe1);
  const long H = static_cast<long>(cfg.height);
  const long W = static_cast<long>(cfg.width);
  const double lambda = cfg.tail_lambda;
  const double width_scale = static_cast<double>(W) / 32.0;

  const long sky_end = std::max(2L, even_in(rng, std::lround(0.18 * H), std::lround(0.30 * H)));
  const long road_h = std::max(2L, even_in(rng, std::lround(0.25 * H), std::lround(0.40 * H)));
  const long walk_h = std::max(2L, even_in(rng, std::lround(0.08 * H), std::lround(0.14 * H)));
  const long road_start = H - road_h;
  const long walk_start = road_start - walk_h;
  if (walk_start <= sky_end) {
    throw std::invalid_argument("WorldConfig: grid too small for the scene layout");
  }

  LabelMap map(cfg.height, cfg.width, kSky);
  auto paint = [&](long r, long c, std::uint8_t v) {
    if (r >= 0 && r < H && c >= 0 && c < W) {
      map.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = v;
    }
  };
  for (long r = 0; r < H; ++r) {
    const std::uint8_t v = r < sky_end      ? kSky
                           : r < walk_start ? kBuilding
                           : r < road_start ? kSidewalk
                                            : kRoad;
    for (long c = 0; c < W; ++c) paint(r, c, v);
  }

  const int vehicles = rng.poisson(kVehiclesPer32 * width_scale);
  for (int i = 0; i < vehicles; ++i) {
    const long vh = rng.range(2, std::min(4L, road_h));
    const long vw = rng.range(3, std::max(3L, W / 6));
    const long top = rng.range(road_start, H - vh);
    const long left = rng.range(0, W - vw);
    for (long r = top; r < top + vh; ++r) {
      for (long c = left; c < left + vw; ++c) paint(r, c, kVehicle);
    }
  }

  const int pedestrians = rng.poisson(lambda * kPedestriansPer32 * width_scale);
  for (int i = 0; i < pedestrians; ++i) {
    const long pw = rng.range(1, 2);
    const long ph = rng.range(1, walk_h);
    const long left = even_in(rng, 0, W - pw);
    for (long r = road_start - ph; r < road_start; ++r) {
      for (long c = left; c < left + pw; ++c) paint(r, c, kPedestrian);
    }
  }

  const int poles = rng.poisson(lambda * kPolesPer32 * width_scale);
  std::vector<long> pole_cols;
  for (int i = 0; i < poles; ++i) {
    for (int attempt = 0; attempt < 8; ++attempt) {
      const long x = even_in(rng, 0, W - 1);
      const bool clear = std::all_of(pole_cols.begin(), pole_cols.end(), [&](long p) {
        return std::abs(p - x) >= static_cast<long>(kPoleSpacing);
      });
      if (!clear) continue;
      pole_cols.push_back(x);
      const long top = even_in(rng, 2, walk_start - 2);
      for (long r = top; r <= walk_start; ++r) paint(r, x, kPole);
      if (rng.bernoulli(kSignProbability)) {
        const long left = rng.bernoulli(0.5) ? x - 1 : x;
        for (long r = top - 2; r < top; ++r) {
          for (long c = left; c <= x + 1; ++c) paint(r, c, kSign);
        }
      }
      break;
    }
  }
  return map;
}

DomainSample generate(std::uint64_t seed, Domain domain, const WorldConfig& cfg) {
  DomainSample s;
  s.seed = seed;
  s.domain = domain;
  s.labels = generate_labels(seed, cfg);
  const RenderParams& rp = domain == Domain::kSource ? cfg.source : cfg.target;
  // Per-image appearance jitter is shared across domains; pixel noise is not.
  Rng jitter = Rng(seed).split(0xc0105);
  Rng noise = Rng(seed).split(domain == Domain::kSource ? 0x5001ce : 0x7a26e7);
  std::array<std::array<double, 3>, kNumClasses> colors = base_colors();
  for (auto& c : colors) {
    for (auto& ch : c) ch += jitter.uniform(-0.04, 0.04);
    c = hue_rotate(c, rp.hue_shift_deg);
    for (auto& ch : c) ch += rp.brightness;
  }
  s.image.height = cfg.height;
  s.image.width = cfg.width;
  s.image.rgb.resize(cfg.height * cfg.width * 3);
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    const auto& c = colors[s.labels.labels[i]];
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = c[ch] + rp.noise_sigma * noise.normal();
      s.image.rgb[i * 3 + ch] = std::clamp(v, 0.0, 1.0);
    }
  }
  return s;
}

std::vector<Violation> validate_structure(const LabelMap& labels) {
  const std::size_t H = labels.height, W = labels.width;
  std::vector<Violation> found;
  auto report = [&](const char* rule, std::size_t r, std::size_t c) {
    for (auto& v : found) {
      if (v.rule == rule) {
        // Keep the first witness in raster order.
        if (r * W + c < v.row * W + v.col) {
          v.row = r;
          v.col = c;
        }
        return;
      }
    }
    found.push_back({rule, r, c});
  };
  if (H == 0 || W == 0) return found;

  bool sky_on_top = false;
  for (std::size_t c = 0; c < W; ++c) sky_on_top = sky_on_top || labels.at(0, c) == kSky;
  if (!sky_on_top) report("no sky band", 0, 0);

  for (std::size_t c = 0; c < W; ++c) {
    // Road zone: maximal suffix of road/vehicle pixels.
    std::size_t road_top = H;
    while (road_top > 0 && is_road_zone(labels.at(road_top - 1, c))) --road_top;
    if (road_top == H) {
      report("no road band", H - 1, c);
    } else {
      const bool bordered =
          road_top > 0 && [&] {
            const auto v = labels.at(road_top - 1, c);
            return v == kSidewalk || v == kPedestrian || v == kPole;
          }();
      if (!bordered) report("road not bordered by sidewalk", road_top, c);
    }
    // Walk zone: maximal run of sidewalk/pedestrian/pole directly above it.
    std::size_t walk_top = road_top;
    if (road_top < H) {
      while (walk_top > 0) {
        const auto v = labels.at(walk_top - 1, c);
        if (v != kSidewalk && v != kPedestrian && v != kPole) break;
        --walk_top;
      }
    }
    int rank = -1;
    for (std::size_t r = 0; r < H; ++r) {
      const auto v = labels.at(r, c);
      const int br = background_rank(v);
      if (br >= 0) {
        if (br < rank) report("band order", r, c);
        rank = std::max(rank, br);
      }
      if (v == kVehicle && r < road_top) report("vehicle off road", r, c);
      if (v == kPedestrian && (r < walk_top || r >= road_top)) {
        report("pedestrian off sidewalk", r, c);
      }
      if (v == kPole) {
        if (c + 1 < W && labels.at(r, c + 1) == kPole) report("pole too wide", r, c);
        const bool run_end = r + 1 == H || labels.at(r + 1, c) != kPole;
        if (run_end) {
          bool rooted = false;
          if (r + 1 < H) {
            const auto below = labels.at(r + 1, c);
            const bool below_ok =
                below == kSidewalk || below == kPedestrian || is_road_zone(below);
            auto walkish = [&](std::size_t cc) {
              const auto v2 = labels.at(r, cc);
              return v2 == kSidewalk || v2 == kPedestrian;
            };
            const bool beside = (c > 0 && walkish(c - 1)) || (c + 1 < W && walkish(c + 1));
            rooted = below_ok && beside;
          }
          if (!rooted) report("pole not rooted", r, c);
        }
      }
    }
  }

  // Sign components: 4-connected, small, resting on a pole top.
  std::vector<std::uint8_t> seen(H * W, 0);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < H * W; ++start) {
    if (labels.labels[start] != kSign || seen[start]) continue;
    std::size_t count = 0;
    bool on_pole = false;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++count;
      const std::size_t r = p / W, c = p % W;
      if (r + 1 < H && labels.at(r + 1, c) == kPole) on_pole = true;
      const std::size_t nbr[4] = {r > 0 ? p - W : p, r + 1 < H ? p + W : p,
                                  c > 0 ? p - 1 : p, c + 1 < W ? p + 1 : p};
      for (auto q : nbr) {
        if (labels.labels[q] == kSign && !seen[q]) {
          seen[q] = 1;
          stack.push_back(q);
        }
      }
    }
    if (!on_pole) report("sign not on pole", start / W, start % W);
    if (count > kMaxSignPixels) report("sign too large", start / W, start % W);
  }
  return found;
}

std::vector<double> class_histogram(const std::vector<LabelMap>& dataset) {
  if (dataset.empty()) throw std::invalid_argument("class_histogram: empty dataset");
  std::vector<double> counts(kNumClasses, 0.0);
  double total = 0.0;
  for (const auto& m : dataset) {
    for (auto v : m.labels) {
      if (v >= kNumClasses) throw std::out_of_range("class_histogram: label out of range");
      counts[v] += 1.0;
    }
    total += static_cast<double>(m.size());
  }
  if (total == 0.0) throw std::invalid_argument("class_histogram: no pixels");
  for (auto& c : counts) c /= total;
  return counts;
}

LabelMap subsample(const LabelMap& labels, std::size_t stride) {
  if (stride == 0) throw std::invalid_argument("subsample: zero stride");
  LabelMap out((labels.height + stride - 1) / stride, (labels.width + stride - 1) / stride);
  for (std::size_t r = 0; r < out.height; ++r) {
    for (std::size_t c = 0; c < out.width; ++c) out.at(r, c) = labels.at(r * stride, c * stride);
  }
  return out;
}

std::vector<LabelMap> Dataset::label_maps() const {
  std::vector<LabelMap> maps;
  maps.reserve(samples.size());
  for (const auto& s : samples) maps.push_back(s.labels);
  return maps;
}

Dataset generate_dataset(std::uint64_t first_seed, std::size_t count, Domain domain,
                         const WorldConfig& cfg) {
  Dataset d;
  d.config = cfg;
  d.domain = domain;
  d.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) d.samples.push_back(generate(first_seed + i, domain, cfg));
  return d;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir);
  const std::size_t n = data.samples.size();
  const std::size_t H = data.config.height, W = data.config.width;
  std::vector<double> images, labels;
  images.reserve(n * H * W * 3);
  labels.reserve(n * H * W);
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : data.samples) {
    images.insert(images.end(), s.image.rgb.begin(), s.image.rgb.end());
    for (auto v : s.labels.labels) labels.push_back(v);
    seeds.push_back(s.seed);
  }
  nd::save_tensor(dir / "images.ndg", nd::Tensor::from({n, H, W, 3}, std::move(images)));
  nd::save_tensor(dir / "labels.ndg", nd::Tensor::from({n, H, W}, std::move(labels)));
  const auto& c = data.config;
  nlohmann::json manifest = {
      {"format", "synthworld-1"},
      {"domain", std::string(domain_name(data.domain))},
      {"count", n},
      {"seeds", seeds},
      {"config",
       {{"height", c.height},
        {"width", c.width},
        {"tail_lambda", c.tail_lambda},
        {"source", {{"hue_shift_deg", c.source.hue_shift_deg},
                    {"brightness", c.source.brightness},
                    {"noise_sigma", c.source.noise_sigma}}},
        {"target", {{"hue_shift_deg", c.target.hue_shift_deg},
                    {"brightness", c.target.brightness},
                    {"noise_sigma", c.target.noise_sigma}}}}},
      {"config_hash", c.hash()},
      {"files", {{"images", "images.ndg"}, {"labels", "labels.ndg"}}},
  };
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("load_dataset: missing " + (dir / "manifest.json").string());
  const auto manifest = nlohmann::json::parse(in);
  if (manifest.at("format") != "synthworld-1") {
    throw std::runtime_error("load_dataset: unsupported format in " + dir.string());
  }
  Dataset d;
  d.domain = parse_domain(manifest.at("domain").get<std::string>());
  const auto& c = manifest.at("config");
  d.config.height = c.at("height");
  d.config.width = c.at("width");
  d.config.tail_lambda = c.at("tail_lambda");
  for (auto [key, rp] : {std::pair{"source", &d.config.source}, std::pair{"target", &d.config.target}}) {
    rp->hue_shift_deg = c.at(key).at("hue_shift_deg");
    rp->brightness = c.at(key).at("brightness");
    rp->noise_sigma = c.at(key).at("noise_sigma");
  }
  if (manifest.at("config_hash") != d.config.hash()) {
    throw std::runtime_error("load_dataset: config hash mismatch in " + dir.string());
  }
  const auto images = nd::load_tensor(dir / "images.ndg");
  const auto labels = nd::load_tensor(dir / "labels.ndg");
  const std::size_t n = manifest.at("count");
  const std::size_t H = d.config.height, W = d.config.width;
  if (images.shape() != nd::Shape{n, H, W, 3} || labels.shape() != nd::Shape{n, H, W}) {
    throw std::runtime_error("load_dataset: tensor shapes disagree with manifest");
  }
  const auto& seeds = manifest.at("seeds");
  for (std::size_t i = 0; i < n; ++i) {
    DomainSample s;
    s.domain = d.domain;
    s.seed = seeds.at(i);
    s.image.height = H;
    s.image.width = W;
    s.image.rgb.assign(images.data().begin() + static_cast<long>(i * H * W * 3),
                       images.data().begin() + static_cast<long>((i + 1) * H * W * 3));
    s.labels = LabelMap(H, W);
    for (std::size_t p = 0; p < H * W; ++p) {
      const double v = labels.data()[i * H * W + p];
      if (v < 0 || v >= static_cast<double>(kNumClasses)) {
        throw std::runtime_error("load_dataset: label out of range");
      }
      s.labels.labels[p] = static_cast<std::uint8_t>(v);
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace comal::world
