#include "comal/trainer/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "comal/bimal/bimal.hpp"
#include "comal/ndgrad/ops.hpp"
#include "comal/ndgrad/random.hpp"
#include "comal/ndgrad/serialize.hpp"
#include "json.hpp"

namespace comal::train {

namespace {

constexpr std::uint64_t kSeedStride = 1'000'000;

std::uint64_t text_key(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i-- > 1;) std::swap(order[i], order[rng.below(i + 1)]);
  return order;
}

nd::Tensor batch_images(const world::Dataset& data, std::span<const std::size_t> idx) {
  std::vector<const world::Image*> ptrs;
  for (std::size_t i : idx) ptrs.push_back(&data.samples[i].image);
  return seg::images_to_tensor(ptrs);
}

nd::Tensor batch_images_nhwc(const world::Dataset& data, std::span<const std::size_t> idx) {
  std::vector<const world::Image*> ptrs;
  for (std::size_t i : idx) ptrs.push_back(&data.samples[i].image);
  return bimal::images_nhwc(ptrs);
}

void freeze(const std::vector<nd::Tensor>& params) {
  for (auto t : params) t.set_requires_grad(false);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

// History rows are stored in checkpoints as a numeric matrix; the phase
// label is kept per checkpoint.
constexpr std::size_t kFixedColumns = 14;

nd::Tensor history_tensor(const std::vector<EpochRecord>& h, std::size_t classes) {
  std::vector<double> v;
  for (const auto& r : h) {
    v.insert(v.end(), {static_cast<double>(r.epoch), r.loss, r.ce_source, r.ce_target, r.entropy,
                       r.nll, r.tau, r.comal_source, r.comal_target,
                       static_cast<double>(r.target_skipped), r.miou, r.head_iou, r.tail_iou,
                       0.0});
    v.insert(v.end(), r.iou.begin(), r.iou.end());
  }
  return nd::Tensor::from({h.size(), kFixedColumns + classes}, std::move(v));
}

std::vector<EpochRecord> history_from(const nd::Tensor& t, const std::string& phase) {
  std::vector<EpochRecord> out;
  if (t.rank() != 2 || t.shape()[0] == 0) return out;
  const std::size_t cols = t.shape()[1];
  for (std::size_t i = 0; i < t.shape()[0]; ++i) {
    const double* r = t.data().data() + i * cols;
    EpochRecord e;
    e.phase = phase;
    e.epoch = static_cast<std::size_t>(r[0]);
    e.loss = r[1];
    e.ce_source = r[2];
    e.ce_target = r[3];
    e.entropy = r[4];
    e.nll = r[5];
    e.tau = r[6];
    e.comal_source = r[7];
    e.comal_target = r[8];
    e.target_skipped = static_cast<std::size_t>(r[9]);
    e.miou = r[10];
    e.head_iou = r[11];
    e.tail_iou = r[12];
    e.iou.assign(r + kFixedColumns, r + cols);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace

Datasets make_datasets(const TrainConfig& cfg) {
  cfg.validate();
  Datasets d;
  const std::uint64_t base = cfg.seed * kSeedStride;
  d.source = world::generate_dataset(base, cfg.source_count, world::Domain::kSource, cfg.world);
  d.target = world::generate_dataset(base + 300'000, cfg.target_count, world::Domain::kTarget,
                                     cfg.world);
  d.eval = world::generate_dataset(base + 600'000, cfg.eval_count, world::Domain::kTarget,
                                   cfg.world);
  d.prior_maps.reserve(cfg.prior_maps);
  for (std::size_t i = 0; i < cfg.prior_maps; ++i) {
    d.prior_maps.push_back(i < d.source.samples.size() ? d.source.samples[i].labels
                                                       : world::generate_labels(base + i, cfg.world));
  }
  return d;
}

bimal::FlowModel pretrain_flow(const TrainConfig& cfg, const Datasets& data) {
  bimal::FlowModel flow(cfg.flow_config(), cfg.seed ^ 0xf1);
  bimal::FlowTrainOptions o;
  o.epochs = cfg.flow_epochs;
  o.lr = cfg.flow_lr;
  o.seed = cfg.seed;
  bimal::train_flow(flow, bimal::relaxed_codes(data.prior_maps, cfg.loss.bimal), o);
  return flow;
}

costruct::StructNet pretrain_struct(const TrainConfig& cfg, const Datasets& data) {
  costruct::StructNet net = costruct::init_structnet(cfg.seed ^ 0x57, cfg.struct_config());
  std::vector<world::LabelMap> grids;
  for (const auto& m : data.prior_maps) grids.push_back(world::subsample(m, cfg.loss.bimal.stride));
  costruct::StructTrainOptions o;
  o.epochs = cfg.struct_epochs;
  o.lr = cfg.struct_lr;
  o.seed = cfg.seed;
  costruct::train_struct(net, grids, o);
  return net;
}

std::vector<double> source_histogram(const Datasets& data) {
  return world::class_histogram(data.source.label_maps());
}

namespace {

std::string need_meta(const nd::Archive& a, const std::filesystem::path& path,
                      const std::string& key) {
  auto it = a.meta.find(key);
  if (it == a.meta.end()) throw nd::FormatError(path.string() + " lacks metadata '" + key + "'");
  return it->second;
}

}  // namespace

void save_flow(const std::filesystem::path& path, const bimal::FlowModel& flow) {
  const auto& c = flow.config();
  nd::Archive a;
  a.meta["kind"] = "flow";
  a.meta["dim"] = std::to_string(c.dim);
  a.meta["layers"] = std::to_string(c.layers);
  a.meta["hidden"] = std::to_string(c.hidden);
  a.meta["scale_clamp"] = fmt(c.scale_clamp);
  a.meta["permutation_seed"] = std::to_string(c.permutation_seed);
  a.tensors = flow.named();
  nd::save_archive(path, a);
}

bimal::FlowModel load_flow(const std::filesystem::path& path) {
  const nd::Archive a = nd::load_archive(path);
  if (need_meta(a, path, "kind") != "flow") throw nd::FormatError(path.string() + " is not a flow");
  bimal::FlowConfig c;
  c.dim = std::stoul(need_meta(a, path, "dim"));
  c.layers = std::stoul(need_meta(a, path, "layers"));
  c.hidden = std::stoul(need_meta(a, path, "hidden"));
  c.scale_clamp = std::stod(need_meta(a, path, "scale_clamp"));
  c.permutation_seed = std::stoull(need_meta(a, path, "permutation_seed"));
  bimal::FlowModel flow(c, 0);
  flow.load(a.tensors);
  return flow;
}

void save_structnet(const std::filesystem::path& path, const costruct::StructNet& net) {
  const auto& c = net.config;
  nd::Archive a;
  a.meta["kind"] = "structnet";
  a.meta["classes"] = std::to_string(c.classes);
  a.meta["height"] = std::to_string(c.height);
  a.meta["width"] = std::to_string(c.width);
  a.meta["embed"] = std::to_string(c.embed);
  a.meta["blocks"] = std::to_string(c.blocks);
  a.meta["heads"] = std::to_string(c.heads);
  a.meta["mlp_hidden"] = std::to_string(c.mlp_hidden);
  a.tensors = net.named();
  nd::save_archive(path, a);
}

costruct::StructNet load_structnet(const std::filesystem::path& path) {
  const nd::Archive a = nd::load_archive(path);
  if (need_meta(a, path, "kind") != "structnet") {
    throw nd::FormatError(path.string() + " is not a structure network");
  }
  costruct::StructConfig c;
  c.classes = std::stoul(need_meta(a, path, "classes"));
  c.height = std::stoul(need_meta(a, path, "height"));
  c.width = std::stoul(need_meta(a, path, "width"));
  c.embed = std::stoul(need_meta(a, path, "embed"));
  c.blocks = std::stoul(need_meta(a, path, "blocks"));
  c.heads = std::stoul(need_meta(a, path, "heads"));
  c.mlp_hidden = std::stoul(need_meta(a, path, "mlp_hidden"));
  costruct::StructNet net = costruct::init_structnet(0, c);
  net.load(a.tensors);
  return net;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out =
      "phase,epoch,loss,ce_source,ce_target,entropy,nll,tau,comal_source,comal_target,"
      "target_skipped,miou,head_iou,tail_iou";
  const std::size_t C = history.empty() ? world::kNumClasses : history.front().iou.size();
  for (std::size_t c = 0; c < C; ++c) {
    out += ",iou_" + (C == world::kNumClasses ? std::string(world::class_name(c)) : std::to_string(c));
  }
  out += "\n";
  for (const auto& r : history) {
    out += r.phase + "," + std::to_string(r.epoch);
    for (double v : {r.loss, r.ce_source, r.ce_target, r.entropy, r.nll, r.tau, r.comal_source,
                     r.comal_target}) {
      out += "," + fmt(v);
    }
    out += "," + std::to_string(r.target_skipped);
    for (double v : {r.miou, r.head_iou, r.tail_iou}) out += "," + fmt(v);
    for (double v : r.iou) out += "," + fmt(v);
    out += "\n";
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nd::Archive a;
  a.meta["epoch"] = std::to_string(ckpt.epoch);
  a.meta["config_hash"] = ckpt.config_hash;
  a.meta["phase"] = ckpt.phase;
  a.meta["classes"] = std::to_string(ckpt.params.config.classes);
  a.meta["widths"] = std::to_string(ckpt.params.config.widths[0]) + "," +
                     std::to_string(ckpt.params.config.widths[1]) + "," +
                     std::to_string(ckpt.params.config.widths[2]);
  a.tensors = ckpt.params.named();
  for (std::size_t i = 0; i < ckpt.velocity.size(); ++i) {
    a.tensors.emplace_back("sgd.velocity" + std::to_string(i),
                           nd::Tensor::from({ckpt.velocity[i].size()}, ckpt.velocity[i]));
  }
  if (!ckpt.history.empty()) {
    a.tensors.emplace_back("history", history_tensor(ckpt.history, ckpt.history.front().iou.size()));
  }
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  nd::save_archive(tmp, a);
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const nd::Archive a = nd::load_archive(path);
  auto meta = [&](const std::string& k) {
    auto it = a.meta.find(k);
    if (it == a.meta.end()) throw nd::FormatError("checkpoint " + path.string() + " lacks " + k);
    return it->second;
  };
  Checkpoint c;
  c.epoch = std::stoul(meta("epoch"));
  c.config_hash = meta("config_hash");
  c.phase = meta("phase");
  seg::SegConfig sc;
  sc.classes = std::stoul(meta("classes"));
  std::stringstream ws(meta("widths"));
  std::string part;
  for (std::size_t i = 0; i < 3 && std::getline(ws, part, ','); ++i) sc.widths[i] = std::stoul(part);
  c.params = seg::zeros(sc);
  c.params.load(a.tensors);
  for (std::size_t i = 0;; ++i) {
    const std::string name = "sgd.velocity" + std::to_string(i);
    if (!a.contains(name)) break;
    const auto d = a.get(name).data();
    c.velocity.emplace_back(d.begin(), d.end());
  }
  if (a.contains("history")) c.history = history_from(a.get("history"), c.phase);
  return c;
}

void sgd_step(std::span<double> param, std::span<const double> grad, std::span<double> velocity,
              double lr, double momentum, double weight_decay) {
  nd::sgd_update(param, grad, velocity, nd::SgdOptions{lr, momentum, weight_decay});
}

std::vector<world::LabelMap> predict(const seg::SegParams& params, const world::Dataset& data) {
  nd::NoGradGuard no_grad;
  std::vector<world::LabelMap> out;
  constexpr std::size_t kChunk = 32;
  const std::size_t n = data.samples.size();
  for (std::size_t s = 0; s < n; s += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, n - s));
    std::iota(idx.begin(), idx.end(), s);
    const auto o = seg::forward(params, batch_images(data, idx));
    for (std::size_t b = 0; b < idx.size(); ++b) out.push_back(seg::argmax_labels(o.probs, b));
  }
  return out;
}

PhaseResult run_phase(Regime regime, const TrainConfig& cfg, const Datasets& data,
                      const Priors& priors, const seg::SegParams& init, const PhaseOptions& opts) {
  cfg.validate();
  if (regime == Regime::kBimal && !priors.flow) {
    throw std::invalid_argument("run_phase(bimal): missing prerequisite: trained flow");
  }
  if (regime == Regime::kComal && !priors.structnet) {
    throw std::invalid_argument("run_phase(comal): missing prerequisite: trained structure network");
  }
  if (regime == Regime::kComal && priors.q_source.empty()) {
    throw std::invalid_argument("run_phase(comal): missing prerequisite: source class histogram");
  }
  // Frozen working copies; the caller's priors are never touched.
  std::optional<bimal::FlowModel> flow;
  std::optional<costruct::StructNet> snet;
  if (regime == Regime::kBimal) {
    flow = priors.flow->clone();
    freeze(flow->parameters());
  }
  if (regime == Regime::kComal) {
    snet = priors.structnet->clone();
    freeze(snet->parameters());
  }

  Checkpoint ck;
  ck.config_hash = cfg.hash();
  ck.phase = opts.phase;
  ck.params = init.clone();
  if (opts.checkpoint && std::filesystem::exists(*opts.checkpoint)) {
    Checkpoint prev = load_checkpoint(*opts.checkpoint);
    if (prev.config_hash == ck.config_hash && prev.phase == ck.phase && prev.epoch <= opts.epochs) {
      ck = std::move(prev);
    }
  }
  nd::Sgd sgd(ck.params.tensors(), cfg.sgd);
  if (!ck.velocity.empty()) sgd.velocity() = ck.velocity;

  const std::size_t S = data.source.samples.size(), T = data.target.samples.size();
  const std::size_t iterations = (S + cfg.batch - 1) / cfg.batch;
  const std::vector<world::LabelMap> eval_labels = data.eval.label_maps();
  // Streams are keyed on the regime so that rows sharing a regime see the
  // same batches and differ only through their loss settings.
  const Rng phase_rng = Rng(cfg.seed).split(text_key(regime_name(regime)));

  for (std::size_t epoch = ck.epoch; epoch < opts.epochs; ++epoch) {
    Rng rng = phase_rng.split(epoch);
    const auto perm_s = shuffled(S, rng);
    const auto perm_t = shuffled(T, rng);
    EpochRecord rec;
    rec.phase = opts.phase;
    rec.epoch = epoch + 1;
    for (std::size_t it = 0; it < iterations; ++it) {
      const std::size_t lo = it * cfg.batch, hi = std::min(S, lo + cfg.batch);
      std::vector<std::size_t> si(perm_s.begin() + static_cast<long>(lo),
                                  perm_s.begin() + static_cast<long>(hi));
      std::vector<std::size_t> ti;
      for (std::size_t k = lo; k < hi; ++k) ti.push_back(perm_t[k % T]);
      std::vector<world::LabelMap> labels;
      for (std::size_t i : si) labels.push_back(data.source.samples[i].labels);

      const seg::SegOutput src = seg::forward(ck.params, batch_images(data.source, si));
      nd::Tensor loss;
      switch (regime) {
        case Regime::kSourceOnly: {
          loss = losses::nll_loss(src.log_probs, losses::as_targets(labels));
          rec.ce_source += loss.item();
          break;
        }
        case Regime::kEntMin: {
          const seg::SegOutput tgt = seg::forward(ck.params, batch_images(data.target, ti));
          nd::Tensor ce = losses::nll_loss(src.log_probs, losses::as_targets(labels));
          nd::Tensor ent = losses::entropy_loss_mean(tgt.probs);
          rec.ce_source += ce.item();
          rec.entropy += ent.item();
          loss = ce + ent * cfg.lambda_entropy;
          break;
        }
        case Regime::kBimal: {
          const seg::SegOutput tgt = seg::forward(ck.params, batch_images(data.target, ti));
          const auto terms = losses::objective_bimal(src, labels, tgt,
                                                     batch_images_nhwc(data.target, ti), *flow,
                                                     cfg.loss);
          rec.ce_source += terms.ce_source;
          rec.nll += terms.nll;
          rec.tau += terms.tau;
          loss = terms.total;
          break;
        }
        case Regime::kComal: {
          const seg::SegOutput tgt = seg::forward(ck.params, batch_images(data.target, ti));
          const auto terms = losses::objective_comal(src, labels, tgt, *snet, priors.q_source,
                                                     cfg.loss, rng.next_u64());
          rec.ce_source += terms.ce_source;
          rec.ce_target += terms.ce_target;
          rec.comal_source += terms.comal_source;
          rec.comal_target += terms.comal_target;
          rec.target_skipped += terms.target_skipped ? 1 : 0;
          loss = terms.total;
          break;
        }
      }
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw std::runtime_error("run_phase(" + opts.phase + "): non-finite loss at epoch " +
                                 std::to_string(epoch + 1) + ", iteration " + std::to_string(it));
      }
      rec.loss += value;
      loss.backward();
      sgd.step();
    }
    const double n = static_cast<double>(iterations);
    for (double* v : {&rec.loss, &rec.ce_source, &rec.ce_target, &rec.entropy, &rec.nll, &rec.tau,
                      &rec.comal_source, &rec.comal_target}) {
      *v /= n;
    }
    const auto m = eval::miou(predict(ck.params, data.eval), eval_labels);
    rec.miou = m.miou;
    rec.head_iou = m.head_iou;
    rec.tail_iou = m.tail_iou;
    rec.iou = m.iou;
    ck.history.push_back(rec);
    ck.epoch = epoch + 1;
    ck.velocity = sgd.velocity();
    if (opts.checkpoint) save_checkpoint(*opts.checkpoint, ck);
  }
  PhaseResult r;
  r.final_metrics = eval::miou(predict(ck.params, data.eval), eval_labels);
  r.checkpoint = std::move(ck);
  return r;
}

namespace {

struct RowSpec {
  const char* key;
  const char* label;
  Regime regime;
  bool use_tau;
  bool comal_term;
};

constexpr RowSpec kRows[] = {
    {"source-only", "Baseline (source only)", Regime::kSourceOnly, false, false},
    {"bimal-llk", "L_llk", Regime::kBimal, false, false},
    {"bimal-llk-tau", "L_llk + tau", Regime::kBimal, true, false},
    {"comal-cls", "L_cls", Regime::kComal, false, false},
    {"comal-full", "L_cls + L_CoMaL", Regime::kComal, false, true},
};

void save_priors(const std::filesystem::path& dir, const Priors& p) {
  std::filesystem::create_directories(dir);
  if (p.flow) save_flow(dir / "flow.ckpt", *p.flow);
  if (p.structnet) save_structnet(dir / "struct.ckpt", *p.structnet);
}

void save_data(const std::filesystem::path& dir, const Datasets& d) {
  world::save_dataset(dir / "source", d.source);
  world::save_dataset(dir / "target", d.target);
  world::save_dataset(dir / "eval", d.eval);
}

void save_predictions(const std::filesystem::path& path, const std::vector<world::LabelMap>& preds) {
  const std::size_t H = preds.front().height, W = preds.front().width;
  std::vector<double> v;
  v.reserve(preds.size() * H * W);
  for (const auto& p : preds) v.insert(v.end(), p.labels.begin(), p.labels.end());
  nd::save_tensor(path, nd::Tensor::from({preds.size(), H, W}, std::move(v)));
}

void finish_phase(const std::filesystem::path& dir, const PhaseResult& r, const Datasets& data) {
  write_text(dir / "history.csv", history_csv(r.checkpoint.history));
  save_predictions(dir / "predictions.ndg", predict(r.checkpoint.params, data.eval));
}

}  // namespace

std::vector<AblationRow> ablation_suite(const TrainConfig& base, const std::filesystem::path& out) {
  base.validate();
  std::filesystem::create_directories(out);
  base.save(out / "config.txt");
  const Datasets data = make_datasets(base);
  save_data(out / "data", data);

  Priors priors;
  priors.flow = pretrain_flow(base, data);
  priors.structnet = pretrain_struct(base, data);
  priors.q_source = source_histogram(data);
  save_priors(out / "priors", priors);

  std::filesystem::create_directories(out / "warmup");
  TrainConfig warm_cfg = base;
  warm_cfg.regime = Regime::kSourceOnly;
  const PhaseResult warm =
      run_phase(Regime::kSourceOnly, warm_cfg, data, priors, seg::init(base.seed ^ 0x5e9),
                {"warmup", base.warmup_epochs, out / "warmup" / "checkpoint.ckpt"});
  finish_phase(out / "warmup", warm, data);

  std::vector<AblationRow> rows;
  nlohmann::json regimes = nlohmann::json::array();
  for (const auto& spec : kRows) {
    TrainConfig cfg = base;
    cfg.regime = spec.regime;
    cfg.loss.bimal.use_tau = spec.use_tau;
    if (!spec.comal_term) cfg.loss.lambda_comal = 0.0;
    const auto dir = out / spec.key;
    std::filesystem::create_directories(dir);
    cfg.save(dir / "config.txt");
    const PhaseResult r = run_phase(spec.regime, cfg, data, priors, warm.checkpoint.params,
                                    {spec.key, base.epochs, dir / "checkpoint.ckpt"});
    finish_phase(dir, r, data);
    rows.push_back({spec.key, spec.label, r.final_metrics.miou, r.final_metrics.head_iou,
                    r.final_metrics.tail_iou, r.final_metrics.iou});
    regimes.push_back({{"key", spec.key}, {"label", spec.label}, {"regime", regime_name(spec.regime)}});
  }

  std::string csv = "key,label,miou,head_iou,tail_iou\n";
  for (const auto& r : rows) {
    csv += r.key + "," + r.label + "," + fmt(r.miou) + "," + fmt(r.head_iou) + "," +
           fmt(r.tail_iou) + "\n";
  }
  write_text(out / "ablation.csv", csv);
  nlohmann::json manifest = {
      {"kind", "ablation"},
      {"seed", base.seed},
      {"config_hash", base.hash()},
      {"regimes", regimes},
      {"tail_classes", std::vector<std::size_t>(world::kTailClasses.begin(), world::kTailClasses.end())},
  };
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  return rows;
}

PhaseResult run_experiment(const TrainConfig& cfg, const std::filesystem::path& out) {
  cfg.validate();
  std::filesystem::create_directories(out);
  cfg.save(out / "config.txt");
  const Datasets data = make_datasets(cfg);
  save_data(out / "data", data);
  Priors priors;
  if (cfg.regime == Regime::kBimal) priors.flow = pretrain_flow(cfg, data);
  if (cfg.regime == Regime::kComal) {
    priors.structnet = pretrain_struct(cfg, data);
    priors.q_source = source_histogram(data);
  }
  save_priors(out / "priors", priors);
  TrainConfig warm_cfg = cfg;
  warm_cfg.regime = Regime::kSourceOnly;
  std::filesystem::create_directories(out / "warmup");
  const PhaseResult warm =
      run_phase(Regime::kSourceOnly, warm_cfg, data, priors, seg::init(cfg.seed ^ 0x5e9),
                {"warmup", cfg.warmup_epochs, out / "warmup" / "checkpoint.ckpt"});
  finish_phase(out / "warmup", warm, data);
  const std::string key = regime_name(cfg.regime);
  std::filesystem::create_directories(out / key);
  PhaseResult r = run_phase(cfg.regime, cfg, data, priors, warm.checkpoint.params,
                            {key, cfg.epochs, out / key / "checkpoint.ckpt"});
  finish_phase(out / key, r, data);
  nlohmann::json manifest = {
      {"kind", "run"},
      {"seed", cfg.seed},
      {"config_hash", cfg.hash()},
      {"regimes", nlohmann::json::array({{{"key", key}, {"label", key}, {"regime", key}}})},
      {"tail_classes", std::vector<std::size_t>(world::kTailClasses.begin(), world::kTailClasses.end())},
  };
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  return r;
}

}  // namespace comal::train
