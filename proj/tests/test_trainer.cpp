#include <cmath>
#include <fstream>

#include "comal/evalcli/render.hpp"
#include "comal/trainer/trainer.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace comal;
using namespace comal::train;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config(std::uint64_t seed = 3) {
  TrainConfig c;
  c.seed = seed;
  c.world.height = c.world.width = 8;
  c.source_count = 8;
  c.target_count = 8;
  c.eval_count = 4;
  c.prior_maps = 16;
  c.batch = 4;
  c.warmup_epochs = 1;
  c.epochs = 2;
  c.sgd.lr = 0.05;
  c.flow_epochs = 1;
  c.flow_layers = 2;
  c.flow_hidden = 8;
  c.struct_epochs = 1;
  c.struct_embed = 8;
  c.struct_blocks = 1;
  c.struct_heads = 2;
  c.loss.pseudo_threshold = 0.5;
  return c;
}

struct Fixture {
  TrainConfig cfg = tiny_config();
  Datasets data = make_datasets(cfg);
  Priors priors;
  Fixture() {
    priors.flow = pretrain_flow(cfg, data);
    priors.structnet = pretrain_struct(cfg, data);
    priors.q_source = source_histogram(data);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

bool same_named(const nd::NamedTensors& a, const nd::NamedTensors& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a[i].second.data(), y = b[i].second.data();
    if (a[i].first != b[i].first || x.size() != y.size() || !std::equal(x.begin(), x.end(), y.begin()))
      return false;
  }
  return true;
}

void check_same_history(const std::vector<EpochRecord>& a, const std::vector<EpochRecord>& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].loss == b[i].loss);
    CHECK(a[i].ce_source == b[i].ce_source);
    CHECK(a[i].ce_target == b[i].ce_target);
    CHECK(a[i].miou == b[i].miou);
    CHECK(a[i].iou == b[i].iou);
  }
}

PhaseOptions phase(const std::string& name, std::size_t epochs) {
  PhaseOptions o;
  o.phase = name;
  o.epochs = epochs;
  return o;
}

}  // namespace

TEST_CASE("sgd_step examples") {
  std::vector<double> p = {1.0, -2.0}, v = {0.0, 0.0};
  const std::vector<double> g = {0.5, 0.25};
  sgd_step(p, g, v, 0.1, 0.0, 0.0);
  CHECK(p[0] == doctest::Approx(0.95).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(-2.025).epsilon(1e-15));

  std::vector<double> q = {1.0, -2.0}, w = {0.0, 0.0};
  const std::vector<double> zero = {0.0, 0.0};
  sgd_step(q, zero, w, 0.1, 0.9, 0.0);
  CHECK(q == std::vector<double>{1.0, -2.0});

  // v <- m v + g + wd p ; p <- p - lr v
  std::vector<double> r = {2.0}, u = {0.5};
  const std::vector<double> gr = {1.0};
  sgd_step(r, gr, u, 0.1, 0.9, 0.01);
  CHECK(u[0] == doctest::Approx(0.9 * 0.5 + 1.0 + 0.01 * 2.0).epsilon(1e-15));
  CHECK(r[0] == doctest::Approx(2.0 - 0.1 * u[0]).epsilon(1e-15));

  const std::vector<double> bad = {NAN};
  std::vector<double> s = {1.0}, sv = {0.0};
  CHECK_THROWS_WITH(sgd_step(s, bad, sv, 0.1, 0.9, 0.0), doctest::Contains("non-finite"));
}

TEST_CASE("sgd_step on a quadratic bowl follows the scalar recurrence") {
  std::vector<double> x = {1.0}, v = {0.0};
  double xs = 1.0, vs = 0.0;
  for (int k = 1; k <= 150; ++k) {
    const std::vector<double> g = {2.0 * x[0]};
    sgd_step(x, g, v, 0.1, 0.9, 0.0);
    vs = 0.9 * vs + 2.0 * xs;
    xs -= 0.1 * vs;
    CHECK(x[0] == doctest::Approx(xs).epsilon(1e-12));
    if (k == 100) CHECK(std::abs(x[0]) < 3e-3);
  }
  CHECK(std::abs(x[0]) < 1e-3);
}

TEST_CASE("default optimizer settings") {
  const TrainConfig c;
  CHECK(c.sgd.lr == 2.5e-4);
  CHECK(c.sgd.momentum == 0.9);
  CHECK(c.sgd.weight_decay == 1e-4);
  CHECK(c.batch == 8);
}

TEST_CASE("config text round-trip and validation") {
  TrainConfig c = tiny_config(17);
  c.regime = Regime::kComal;
  c.loss.qprime = {0.5, 0.1, 0.1, 0.1, 0.05, 0.05, 0.05, 0.05};
  c.loss.bimal.use_tau = false;
  const TrainConfig back = TrainConfig::from_text(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK(back.hash() == c.hash());
  CHECK(back.regime == Regime::kComal);
  CHECK(back.loss.qprime == c.loss.qprime);

  const fs::path dir = testutil::temp_dir("config");
  c.save(dir / "run.cfg");
  CHECK(TrainConfig::load(dir / "run.cfg").to_text() == c.to_text());
  fs::remove_all(dir);

  TrainConfig d = c;
  d.set("lambda_comal", "0.5");
  CHECK(d.loss.lambda_comal == 0.5);
  CHECK(d.hash() != c.hash());
  CHECK_THROWS_WITH(d.set("no_such_key", "1"), doctest::Contains("no_such_key"));
  CHECK_THROWS(d.set("epochs", "many"));
  CHECK_THROWS(parse_regime("adversarial"));
  for (Regime r : {Regime::kSourceOnly, Regime::kEntMin, Regime::kBimal, Regime::kComal})
    CHECK(parse_regime(regime_name(r)) == r);

  TrainConfig z = tiny_config();
  z.epochs = 0;
  CHECK_NOTHROW(z.validate());  // a warm-up-only run is allowed
  z.warmup_epochs = 0;
  CHECK_THROWS(z.validate());
  z = tiny_config();
  z.batch = 0;
  CHECK_THROWS(z.validate());
  CHECK_NOTHROW(tiny_config().validate());
  CHECK_NOTHROW(desk_profile(1).validate());
  // comments and blank lines are tolerated
  CHECK(TrainConfig::from_text("# note\n\nepochs = 7\n").epochs == 7);
}

TEST_CASE("datasets are deterministic and domains differ") {
  const auto cfg = tiny_config(5);
  const auto a = make_datasets(cfg), b = make_datasets(cfg);
  REQUIRE(a.source.samples.size() == 8);
  REQUIRE(a.eval.samples.size() == 4);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(a.source.samples[i].image.rgb == b.source.samples[i].image.rgb);
    CHECK(a.target.samples[i].labels.labels == b.target.samples[i].labels.labels);
  }
  CHECK(a.source.domain == world::Domain::kSource);
  CHECK(a.target.domain == world::Domain::kTarget);
  CHECK(a.eval.domain == world::Domain::kTarget);
  CHECK(a.prior_maps.size() == 16);
}

TEST_CASE("model files round-trip") {
  const auto& f = fixture();
  const fs::path dir = testutil::temp_dir("models");
  save_flow(dir / "flow.ckpt", *f.priors.flow);
  save_structnet(dir / "struct.ckpt", *f.priors.structnet);
  CHECK(same_named(load_flow(dir / "flow.ckpt").named(), f.priors.flow->named()));
  CHECK(same_named(load_structnet(dir / "struct.ckpt").named(), f.priors.structnet->named()));
  CHECK_THROWS_AS(load_flow(dir / "struct.ckpt"), nd::FormatError);
  CHECK_THROWS_AS(load_structnet(dir / "flow.ckpt"), nd::FormatError);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round-trip is bit-identical") {
  const auto& f = fixture();
  const auto r = run_phase(Regime::kSourceOnly, f.cfg, f.data, f.priors, seg::init(1), phase("warmup", 2));
  const fs::path dir = testutil::temp_dir("ckpt");
  save_checkpoint(dir / "c.ckpt", r.checkpoint);
  const Checkpoint back = load_checkpoint(dir / "c.ckpt");
  CHECK(same_named(back.params.named(), r.checkpoint.params.named()));
  CHECK(back.velocity == r.checkpoint.velocity);
  CHECK(back.epoch == 2);
  CHECK(back.phase == "warmup");
  CHECK(back.config_hash == f.cfg.hash());
  check_same_history(back.history, r.checkpoint.history);
  CHECK(history_csv(back.history) == history_csv(r.checkpoint.history));
  testutil::write_bytes(dir / "junk.ckpt", "not a checkpoint");
  CHECK_THROWS(load_checkpoint(dir / "junk.ckpt"));
  fs::remove_all(dir);
}

TEST_CASE("history csv layout") {
  const auto& f = fixture();
  const auto r = run_phase(Regime::kSourceOnly, f.cfg, f.data, f.priors, seg::init(1), phase("warmup", 1));
  const std::string csv = history_csv(r.checkpoint.history);
  const std::string header = csv.substr(0, csv.find('\n'));
  CHECK(header.rfind("phase,epoch,loss,", 0) == 0);
  CHECK(header.find(",miou,head_iou,tail_iou,") != std::string::npos);
  CHECK(header.find("iou_pedestrian") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
  CHECK(csv.find("\nwarmup,1,") != std::string::npos);
}

TEST_CASE("identical seeds give identical histories for every regime") {
  const auto& f = fixture();
  for (Regime reg : {Regime::kSourceOnly, Regime::kEntMin, Regime::kBimal, Regime::kComal}) {
    const auto a = run_phase(reg, f.cfg, f.data, f.priors, seg::init(2), phase("p", 2));
    const auto b = run_phase(reg, f.cfg, f.data, f.priors, seg::init(2), phase("p", 2));
    check_same_history(a.checkpoint.history, b.checkpoint.history);
    CHECK(same_named(a.checkpoint.params.named(), b.checkpoint.params.named()));
  }
}

TEST_CASE("resuming from a checkpoint matches an uninterrupted run") {
  const auto& f = fixture();
  for (Regime reg : {Regime::kSourceOnly, Regime::kComal}) {
    const fs::path dir = testutil::temp_dir("resume");
    const auto full = run_phase(reg, f.cfg, f.data, f.priors, seg::init(4), phase("adapt", 3));
    PhaseOptions first = phase("adapt", 1);
    first.checkpoint = dir / "c.ckpt";
    run_phase(reg, f.cfg, f.data, f.priors, seg::init(4), first);
    PhaseOptions rest = phase("adapt", 3);
    rest.checkpoint = dir / "c.ckpt";
    // the init passed here is ignored once the checkpoint is picked up
    const auto resumed = run_phase(reg, f.cfg, f.data, f.priors, seg::init(99), rest);
    check_same_history(resumed.checkpoint.history, full.checkpoint.history);
    CHECK(same_named(resumed.checkpoint.params.named(), full.checkpoint.params.named()));

    // a different configuration starts over instead of resuming
    TrainConfig other = f.cfg;
    other.sgd.lr = 0.01;
    const auto fresh = run_phase(reg, other, f.data, f.priors, seg::init(4), rest);
    CHECK(fresh.checkpoint.history.front().epoch == 1);
    CHECK(fresh.checkpoint.history.size() == 3);
    fs::remove_all(dir);
  }
}

TEST_CASE("frozen priors are untouched by adaptation") {
  const auto& f = fixture();
  const auto flow_before = f.priors.flow->named();
  const auto net_before = f.priors.structnet->named();
  run_phase(Regime::kBimal, f.cfg, f.data, f.priors, seg::init(5), phase("b", 2));
  TrainConfig c = f.cfg;
  c.loss.lambda_comal = 0.5;
  run_phase(Regime::kComal, c, f.data, f.priors, seg::init(5), phase("c", 2));
  CHECK(same_named(f.priors.flow->named(), flow_before));
  CHECK(same_named(f.priors.structnet->named(), net_before));
  for (const auto& t : f.priors.flow->parameters()) CHECK(!t.has_grad());
}

TEST_CASE("missing prerequisites are named") {
  const auto& f = fixture();
  Priors none;
  CHECK_THROWS_WITH(run_phase(Regime::kBimal, f.cfg, f.data, none, seg::init(1), phase("x", 1)),
                    doctest::Contains("trained flow"));
  CHECK_THROWS_WITH(run_phase(Regime::kComal, f.cfg, f.data, none, seg::init(1), phase("x", 1)),
                    doctest::Contains("structure network"));
  Priors no_hist = f.priors;
  no_hist.q_source.clear();
  CHECK_THROWS_WITH(run_phase(Regime::kComal, f.cfg, f.data, no_hist, seg::init(1), phase("x", 1)),
                    doctest::Contains("histogram"));
  CHECK_NOTHROW(run_phase(Regime::kSourceOnly, f.cfg, f.data, none, seg::init(1), phase("x", 1)));
}

TEST_CASE("comal without its conditional term and with flat weights is the plain pseudo-label baseline") {
  const auto& f = fixture();
  TrainConfig flat = f.cfg;
  flat.loss.lambda_comal = 0.0;
  flat.loss.class_balanced = false;
  TrainConfig ratio_one = f.cfg;
  ratio_one.loss.lambda_comal = 0.0;
  ratio_one.loss.qprime = f.priors.q_source;  // q'/q == 1 for every class present
  bool all_present = true;
  for (double q : f.priors.q_source) all_present = all_present && q > 1e-6;
  REQUIRE(all_present);
  const auto a = run_phase(Regime::kComal, flat, f.data, f.priors, seg::init(6), phase("c", 2));
  const auto b = run_phase(Regime::kComal, ratio_one, f.data, f.priors, seg::init(6), phase("c", 2));
  check_same_history(a.checkpoint.history, b.checkpoint.history);
  for (const auto& r : a.checkpoint.history) {
    CHECK(r.comal_source == 0.0);
    CHECK(r.loss == doctest::Approx(r.ce_source + r.ce_target).epsilon(1e-12));
  }
}

TEST_CASE("source-only cross-entropy falls steadily on a four-scene set") {
  TrainConfig c = tiny_config(8);
  c.source_count = 4;
  c.batch = 4;
  c.sgd.lr = 0.01;
  const auto data = make_datasets(c);
  const auto r = run_phase(Regime::kSourceOnly, c, data, Priors{}, seg::init(8), phase("s", 10));
  const auto& h = r.checkpoint.history;
  REQUIRE(h.size() == 10);
  for (std::size_t i = 1; i < h.size(); ++i) CHECK(h[i].ce_source < h[i - 1].ce_source);
}

TEST_CASE("predict returns one map per scene") {
  const auto& f = fixture();
  const auto p = predict(seg::init(1), f.data.eval);
  REQUIRE(p.size() == f.data.eval.samples.size());
  for (const auto& m : p) {
    CHECK(m.height == 8);
    for (auto l : m.labels) CHECK(l < world::kNumClasses);
  }
}

TEST_CASE("ablation suite layout and rerun determinism") {
  TrainConfig c = tiny_config(9);
  const fs::path a = testutil::temp_dir("abl_a"), b = testutil::temp_dir("abl_b");
  const auto rows = ablation_suite(c, a);
  REQUIRE(rows.size() == 5);
  const char* keys[] = {"source-only", "bimal-llk", "bimal-llk-tau", "comal-cls", "comal-full"};
  const char* labels[] = {"Baseline (source only)", "L_llk", "L_llk + tau", "L_cls", "L_cls + L_CoMaL"};
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(rows[i].key == keys[i]);
    CHECK(rows[i].label == labels[i]);
    for (const char* file : {"config.txt", "checkpoint.ckpt", "history.csv", "predictions.ndg"})
      CHECK(fs::exists(a / keys[i] / file));
  }
  for (const char* p : {"manifest.json", "ablation.csv", "config.txt", "priors/flow.ckpt",
                        "priors/struct.ckpt", "data/eval/manifest.json", "warmup/checkpoint.ckpt"})
    CHECK(fs::exists(a / p));
  const auto again = ablation_suite(c, b);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(again[i].miou == rows[i].miou);
    CHECK(again[i].tail_iou == rows[i].tail_iou);
  }
  CHECK(eval::read_file((a / "ablation.csv").string()) == eval::read_file((b / "ablation.csv").string()));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("run_experiment writes a single regime") {
  TrainConfig c = tiny_config(10);
  c.regime = Regime::kEntMin;
  const fs::path dir = testutil::temp_dir("exp");
  const auto r = run_experiment(c, dir);
  CHECK(r.checkpoint.history.size() == c.epochs);
  CHECK(fs::exists(dir / "entmin" / "history.csv"));
  CHECK(fs::exists(dir / "manifest.json"));
  fs::remove_all(dir);
}
