#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "comal/trainer/trainer.hpp"

namespace comal::train {

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw std::invalid_argument("config: '" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw std::invalid_argument("config: '" + key + "' expects a non-negative integer, got '" +
                                v + "'");
  }
  return static_cast<std::size_t>(out);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: '" + key + "' expects true|false, got '" + v + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

struct Field {
  const char* key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

#define SIZE_FIELD(name, member)                                                          \
  Field {                                                                                 \
    name, [](const TrainConfig& c) { return std::to_string(c.member); },                  \
        [](TrainConfig& c, const std::string& v) { c.member = to_size(name, v); }         \
  }
#define REAL_FIELD(name, member)                                                          \
  Field {                                                                                 \
    name, [](const TrainConfig& c) { return fmt(c.member); },                             \
        [](TrainConfig& c, const std::string& v) { c.member = to_double(name, v); }       \
  }
#define BOOL_FIELD(name, member)                                                          \
  Field {                                                                                 \
    name, [](const TrainConfig& c) { return std::string(c.member ? "true" : "false"); },  \
        [](TrainConfig& c, const std::string& v) { c.member = to_bool(name, v); }         \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      SIZE_FIELD("seed", seed),
      Field{"regime", [](const TrainConfig& c) { return regime_name(c.regime); },
            [](TrainConfig& c, const std::string& v) { c.regime = parse_regime(v); }},
      SIZE_FIELD("warmup_epochs", warmup_epochs),
      SIZE_FIELD("epochs", epochs),
      SIZE_FIELD("batch", batch),
      REAL_FIELD("lr", sgd.lr),
      REAL_FIELD("momentum", sgd.momentum),
      REAL_FIELD("weight_decay", sgd.weight_decay),
      REAL_FIELD("lambda_entropy", lambda_entropy),
      REAL_FIELD("lambda_bimal", loss.lambda_bimal),
      REAL_FIELD("lambda_comal", loss.lambda_comal),
      REAL_FIELD("pseudo_threshold", loss.pseudo_threshold),
      REAL_FIELD("weight_clamp", loss.weight_clamp),
      Field{"qprime",
            [](const TrainConfig& c) {
              if (c.loss.qprime.empty()) return std::string("uniform");
              std::string s;
              for (std::size_t i = 0; i < c.loss.qprime.size(); ++i) {
                s += (i ? "," : "") + fmt(c.loss.qprime[i]);
              }
              return s;
            },
            [](TrainConfig& c, const std::string& v) {
              c.loss.qprime.clear();
              if (v == "uniform") return;
              std::stringstream ss(v);
              std::string part;
              while (std::getline(ss, part, ',')) c.loss.qprime.push_back(to_double("qprime", trim(part)));
            }},
      BOOL_FIELD("class_balanced", loss.class_balanced),
      SIZE_FIELD("comal_anchors", loss.comal_anchors),
      REAL_FIELD("relax_eps", loss.bimal.eps),
      SIZE_FIELD("prior_stride", loss.bimal.stride),
      REAL_FIELD("sigma1", loss.bimal.sigma1),
      REAL_FIELD("sigma2", loss.bimal.sigma2),
      Field{"tau_form", [](const TrainConfig& c) { return bimal::tau_form_name(c.loss.bimal.form); },
            [](TrainConfig& c, const std::string& v) { c.loss.bimal.form = bimal::parse_tau_form(v); }},
      BOOL_FIELD("use_tau", loss.bimal.use_tau),
      SIZE_FIELD("height", world.height),
      SIZE_FIELD("width", world.width),
      REAL_FIELD("tail_lambda", world.tail_lambda),
      REAL_FIELD("source_hue", world.source.hue_shift_deg),
      REAL_FIELD("source_brightness", world.source.brightness),
      REAL_FIELD("source_noise", world.source.noise_sigma),
      REAL_FIELD("target_hue", world.target.hue_shift_deg),
      REAL_FIELD("target_brightness", world.target.brightness),
      REAL_FIELD("target_noise", world.target.noise_sigma),
      SIZE_FIELD("source_count", source_count),
      SIZE_FIELD("target_count", target_count),
      SIZE_FIELD("eval_count", eval_count),
      SIZE_FIELD("prior_maps", prior_maps),
      SIZE_FIELD("flow_epochs", flow_epochs),
      REAL_FIELD("flow_lr", flow_lr),
      SIZE_FIELD("flow_layers", flow_layers),
      SIZE_FIELD("flow_hidden", flow_hidden),
      SIZE_FIELD("struct_epochs", struct_epochs),
      REAL_FIELD("struct_lr", struct_lr),
      SIZE_FIELD("struct_embed", struct_embed),
      SIZE_FIELD("struct_blocks", struct_blocks),
      SIZE_FIELD("struct_heads", struct_heads),
  };
  return f;
}

}  // namespace

Regime parse_regime(const std::string& name) {
  if (name == "source-only") return Regime::kSourceOnly;
  if (name == "entmin") return Regime::kEntMin;
  if (name == "bimal") return Regime::kBimal;
  if (name == "comal") return Regime::kComal;
  throw std::invalid_argument("unknown regime '" + name +
                              "' (expected source-only|entmin|bimal|comal)");
}

std::string regime_name(Regime r) {
  switch (r) {
    case Regime::kSourceOnly: return "source-only";
    case Regime::kEntMin: return "entmin";
    case Regime::kBimal: return "bimal";
    case Regime::kComal: return "comal";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (batch == 0) throw std::invalid_argument("config: batch must be positive");
  if (epochs == 0 && warmup_epochs == 0) throw std::invalid_argument("config: no epochs to run");
  if (source_count == 0 || target_count == 0 || eval_count == 0 || prior_maps == 0) {
    throw std::invalid_argument("config: dataset sizes must be positive");
  }
  world.validate();
  const std::size_t s = loss.bimal.stride;
  if (s == 0 || world.height % s != 0 || world.width % s != 0) {
    throw std::invalid_argument("config: prior_stride must divide the world size");
  }
  struct_config().validate();
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  }
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return from_text(ss.str());
}

void TrainConfig::save(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write config " + path.string());
  f << to_text();
}

std::string TrainConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_text()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

costruct::StructConfig TrainConfig::struct_config() const {
  costruct::StructConfig s;
  s.height = world.height / loss.bimal.stride;
  s.width = world.width / loss.bimal.stride;
  s.embed = struct_embed;
  s.blocks = struct_blocks;
  s.heads = struct_heads;
  s.mlp_hidden = 2 * struct_embed;
  return s;
}

bimal::FlowConfig TrainConfig::flow_config() const {
  bimal::FlowConfig f = bimal::flow_config_for(world.height, world.width, loss.bimal);
  f.layers = flow_layers;
  f.hidden = flow_hidden;
  return f;
}

TrainConfig desk_profile(std::uint64_t seed) {
  TrainConfig c;
  c.seed = seed;
  c.world.height = 16;
  c.world.width = 16;
  c.source_count = 128;
  c.target_count = 128;
  c.eval_count = 64;
  c.prior_maps = 512;
  c.warmup_epochs = 20;
  c.epochs = 20;
  c.sgd.lr = 0.05;
  c.loss.lambda_bimal = 1e-5;
  c.flow_epochs = 8;
  c.struct_epochs = 10;
  return c;
}

}  // namespace comal::train
