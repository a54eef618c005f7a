#include <cmath>

#include "comal/evalcli/metrics.hpp"
#include "comal/losses/losses.hpp"
#include "comal/ndgrad/grad_check.hpp"
#include "comal/ndgrad/ops.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace comal;
using namespace comal::losses;
using nd::Tensor;

namespace {

seg::SegOutput from_logits(const Tensor& logits) {
  return {logits, nd::log_softmax(logits, 3), nd::softmax(logits, 3)};
}

world::LabelMap labels_of(std::size_t h, std::size_t w, std::vector<std::uint8_t> v) {
  world::LabelMap m(h, w);
  m.labels = std::move(v);
  return m;
}

struct Scenes {
  std::vector<world::LabelMap> labels;
  std::vector<world::Image> images;
  Tensor batch;
};

Scenes scenes(std::uint64_t first, std::size_t n, world::Domain d, double tail = 1.0) {
  world::WorldConfig wc;
  wc.height = wc.width = 16;
  wc.tail_lambda = tail;
  Scenes s;
  for (std::size_t i = 0; i < n; ++i) {
    auto smp = world::generate(first + i, d, wc);
    s.labels.push_back(smp.labels);
    s.images.push_back(smp.image);
  }
  std::vector<const world::Image*> ptrs;
  for (const auto& im : s.images) ptrs.push_back(&im);
  s.batch = seg::images_to_tensor(ptrs);
  return s;
}

costruct::StructConfig tiny_struct() {
  costruct::StructConfig c;
  c.height = c.width = 4;
  c.embed = 16;
  c.blocks = 1;
  c.heads = 2;
  c.mlp_hidden = 16;
  return c;
}

}  // namespace

TEST_CASE("cross-entropy examples") {
  const auto lab = labels_of(1, 2, {0, 1});
  const Tensor perfect = Tensor::from({1, 1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
  CHECK(cross_entropy(perfect, std::span(&lab, 1)).item() <= 1e-10);
  CHECK(cross_entropy(Tensor::full({1, 1, 2, 2}, 0.5), std::span(&lab, 1)).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-14));
  const Tensor p = Tensor::from({1, 1, 2, 2}, {0.9, 0.1, 0.5, 0.5});
  CHECK(cross_entropy(p, std::span(&lab, 1)).item() ==
        doctest::Approx((-std::log(0.9) - std::log(0.5)) / 2.0).epsilon(1e-14));
}

TEST_CASE("cross-entropy weights and ignored pixels") {
  const Tensor p = Tensor::from({1, 1, 3, 2}, {0.9, 0.1, 0.5, 0.5, 0.2, 0.8});
  PseudoLabelMap t{1, 3, {0, kIgnore, 1}};
  const std::vector<double> w = {2.0, 3.0};
  CHECK(cross_entropy(p, std::span(&t, 1), w).item() ==
        doctest::Approx((-2.0 * std::log(0.9) - 3.0 * std::log(0.8)) / 2.0).epsilon(1e-14));
  PseudoLabelMap none{1, 3, {kIgnore, kIgnore, kIgnore}};
  CHECK(none.ignored() == 3);
  CHECK_THROWS(cross_entropy(p, std::span(&none, 1)));
  CHECK_THROWS_AS(cross_entropy(Tensor::full({1, 1, 2, 2}, 0.5), std::span(&t, 1)), nd::ShapeError);
}

TEST_CASE("entropy examples") {
  CHECK(entropy_loss(Tensor::full({1, 3, 4, 5}, 0.2)).item() == doctest::Approx(12.0).epsilon(1e-13));
  CHECK(entropy_loss(Tensor::from({1, 1, 2, 2}, {1.0, 0.0, 0.0, 1.0})).item() == doctest::Approx(0.0));
  CHECK(entropy_loss(Tensor::from({1, 1, 1, 2}, {0.9, 0.1})).item() ==
        doctest::Approx(-(0.9 * std::log(0.9) + 0.1 * std::log(0.1)) / std::log(2.0)).epsilon(1e-13));
  CHECK(entropy_loss(Tensor::from({1, 1, 1, 2}, {0.9, 0.1})).item() == doctest::Approx(0.4690).epsilon(1e-4));
  CHECK(entropy_loss_mean(Tensor::full({2, 3, 4, 5}, 0.2)).item() == doctest::Approx(1.0).epsilon(1e-13));
}

TEST_CASE("entropy is bounded and maximal at uniform") {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const Tensor y = testutil::random_simplex({1, 3, 3, 4}, rng);
    const double e = entropy_loss(y).item();
    CHECK(e >= 0.0);
    CHECK(e <= 9.0 + 1e-12);
  }
  // small perturbations of the uniform map only lower it
  const double top = entropy_loss(Tensor::full({1, 1, 1, 4}, 0.25)).item();
  for (int t = 0; t < 50; ++t) {
    const double d = rng.uniform(-0.05, 0.05);
    const Tensor y = Tensor::from({1, 1, 1, 4}, {0.25 + d, 0.25 - d, 0.25, 0.25});
    if (d != 0.0) CHECK(entropy_loss(y).item() < top);
  }
}

TEST_CASE("Gibbs inequality on random simplex pairs") {
  Rng rng(2);
  for (int t = 0; t < 2000; ++t) {
    const std::size_t C = 2 + rng.below(6);
    const Tensor p = testutil::random_simplex({C}, rng), q = testutil::random_simplex({C}, rng);
    double cross = 0.0, self = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      cross -= p.data()[c] * std::log(q.data()[c]);
      self -= p.data()[c] * std::log(p.data()[c]);
    }
    CHECK(cross >= self - 1e-12);
  }
}

TEST_CASE("cross-entropy of labels drawn from p is at least its entropy") {
  // exhaustive over all 2-pixel labelings, weighted by their probability under p
  const Tensor p = Tensor::from({1, 1, 2, 3}, {0.6, 0.3, 0.1, 0.2, 0.2, 0.6});
  double expected_ce = 0.0;
  for (std::uint8_t a = 0; a < 3; ++a)
    for (std::uint8_t b = 0; b < 3; ++b) {
      const auto lab = labels_of(1, 2, {a, b});
      const Tensor q = Tensor::from({1, 1, 2, 3}, {0.4, 0.4, 0.2, 0.3, 0.3, 0.4});
      expected_ce += p.data()[a] * p.data()[3 + b] * cross_entropy(q, std::span(&lab, 1)).item();
    }
  const double ent = entropy_loss_mean(p).item() * std::log(3.0);
  CHECK(expected_ce >= ent);
}

TEST_CASE("class weight examples") {
  const auto ones = class_weights(uniform_distribution(4), {}, 10.0);
  for (double w : ones) CHECK(w == doctest::Approx(1.0).epsilon(1e-14));
  const std::vector<double> q = {0.75, 0.25};
  const auto w = class_weights(q, {}, 10.0);
  CHECK(w[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(w[1] == doctest::Approx(2.0).epsilon(1e-14));
  const std::vector<double> tiny = {0.999, 0.001};
  CHECK(class_weights(tiny, {}, 10.0)[1] == 10.0);
  const std::vector<double> absent = {1.0, 0.0};
  CHECK(class_weights(absent, {}, 10.0)[1] == 10.0);
  const std::vector<double> bad = {0.5, 0.6};
  CHECK_THROWS(class_weights(bad, {}, 10.0));
  const std::vector<double> negative = {1.5, -0.5};
  CHECK_THROWS(class_weights(negative, {}, 10.0));
}

TEST_CASE("uniformly scaled weights keep the weighted-CE minimizer") {
  const std::vector<double> q = {0.5, 0.3, 0.2};
  const std::vector<double> qp = {0.2, 0.3, 0.5};
  const auto w1 = class_weights(q, qp, 100.0);
  CHECK(w1[2] == doctest::Approx(2.5).epsilon(1e-13));
  std::vector<double> w2 = w1;
  for (double& x : w2) x *= 2.0;
  const auto lab = labels_of(1, 3, {0, 1, 2});
  Rng rng(3);
  std::size_t best1 = 0, best2 = 0;
  double v1 = 1e9, v2 = 1e9;
  for (std::size_t k = 0; k < 20; ++k) {
    const Tensor p = testutil::random_simplex({1, 1, 3, 3}, rng);
    const double a = cross_entropy(p, std::span(&lab, 1), w1).item();
    const double b = cross_entropy(p, std::span(&lab, 1), w2).item();
    if (a < v1) v1 = a, best1 = k;
    if (b < v2) v2 = b, best2 = k;
  }
  CHECK(best1 == best2);
}

TEST_CASE("pseudo label examples") {
  const Tensor p = Tensor::from({1, 1, 2, 2}, {0.95, 0.05, 0.6, 0.4});
  const auto pl = pseudo_labels(p, 0.9);
  REQUIRE(pl.size() == 1);
  CHECK(pl[0].labels[0] == 0);
  CHECK(pl[0].labels[1] == kIgnore);
  Rng rng(4);
  const Tensor r = testutil::random_simplex({3, 4, 4, 2}, rng);
  for (const auto& m : pseudo_labels(r, 0.5)) CHECK(m.ignored() == 0);
  // non-ignored entries are argmaxes
  const Tensor r3 = testutil::random_simplex({2, 4, 4, 3}, rng);
  const auto pl3 = pseudo_labels(r3, 0.5);
  for (std::size_t b = 0; b < 2; ++b) {
    const auto am = seg::argmax_labels(r3, b);
    for (std::size_t i = 0; i < 16; ++i)
      if (pl3[b].labels[i] != kIgnore) CHECK(pl3[b].labels[i] == am.labels[i]);
  }
}

TEST_CASE("bimal objective reduces and decomposes") {
  Rng rng(5);
  const std::size_t C = 3;
  const auto lab = labels_of(4, 4, std::vector<std::uint8_t>(16, 1));
  const auto src = from_logits(testutil::random_tensor({1, 4, 4, C}, rng));
  const auto tgt = from_logits(testutil::random_tensor({1, 4, 4, C}, rng));
  const Tensor img = testutil::random_tensor({1, 4, 4, 3}, rng, false, 1.0);
  bimal::FlowConfig fc;
  fc.dim = 2 * 2 * C;
  fc.hidden = 8;
  const bimal::FlowModel flow(fc, 1, bimal::FlowInit::kRandom);
  LossConfig cfg;
  cfg.lambda_bimal = 0.0;
  const double ce = cross_entropy(src.probs, std::span(&lab, 1)).item();
  CHECK(objective_bimal(src, std::span(&lab, 1), tgt, img, flow, cfg).total.item() ==
        doctest::Approx(ce).epsilon(1e-12));
  cfg.lambda_bimal = 0.3;
  const auto t = objective_bimal(src, std::span(&lab, 1), tgt, img, flow, cfg);
  const double b = bimal::bimal_loss(flow, img, tgt.probs, cfg.bimal).item();
  CHECK(t.total.item() == doctest::Approx(ce + 0.3 * b).epsilon(1e-12));
  CHECK(t.nll + t.tau == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("bimal objective gradient matches finite differences") {
  Rng rng(6);
  const std::size_t C = 3;
  const auto lab = labels_of(4, 4, {0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0});
  const Tensor src_logits = testutil::random_tensor({1, 4, 4, C}, rng);
  const Tensor img = testutil::random_tensor({1, 4, 4, 3}, rng, false, 1.0);
  bimal::FlowConfig fc;
  fc.dim = 2 * 2 * C;
  fc.hidden = 8;
  const bimal::FlowModel flow(fc, 2, bimal::FlowInit::kRandom);
  LossConfig cfg;
  cfg.lambda_bimal = 0.5;
  auto f = [&](const Tensor& tl) {
    return objective_bimal(from_logits(src_logits + tl * 0.5), std::span(&lab, 1),
                           from_logits(tl), img, flow, cfg).total;
  };
  CHECK(nd::grad_check_error(f, testutil::random_tensor({1, 4, 4, C}, rng)) < 1e-4);
}

TEST_CASE("comal objective reduces and decomposes") {
  Rng rng(7);
  const std::size_t C = world::kNumClasses;
  const auto net = costruct::init_structnet(3, tiny_struct());
  std::vector<world::LabelMap> lab(2, world::LabelMap(8, 8));
  for (auto& m : lab)
    for (auto& v : m.labels) v = static_cast<std::uint8_t>(rng.below(C));
  const auto src = from_logits(testutil::random_tensor({2, 8, 8, C}, rng, false, 4.0));
  const auto tgt = from_logits(testutil::random_tensor({2, 8, 8, C}, rng, false, 4.0));
  LossConfig cfg;
  cfg.lambda_comal = 0.0;
  cfg.pseudo_threshold = 0.6;
  const auto uq = uniform_distribution(C);
  const auto plain = objective_comal(src, lab, tgt, net, uq, cfg, 1);
  const auto pseudo = pseudo_labels(tgt.probs, 0.6);
  const double expect = cross_entropy(src.probs, std::span<const world::LabelMap>(lab)).item() +
                        cross_entropy(tgt.probs, std::span<const PseudoLabelMap>(pseudo)).item();
  CHECK(plain.total.item() == doctest::Approx(expect).epsilon(1e-12));

  cfg.lambda_comal = 0.25;
  const std::vector<double> q = {0.3, 0.2, 0.2, 0.1, 0.1, 0.05, 0.04, 0.01};
  const auto w = class_weights(q, {}, cfg.weight_clamp);
  const auto t = objective_comal(src, lab, tgt, net, q, cfg, 9);
  const double ws = cross_entropy(src.probs, std::span<const world::LabelMap>(lab), w).item();
  const double wt = cross_entropy(tgt.probs, std::span<const PseudoLabelMap>(pseudo), w).item();
  const double cs = costruct::comal_loss(net, to_struct_grid(src.probs, net.config), cfg.comal_anchors, 9).item();
  const double ct = costruct::comal_loss(net, to_struct_grid(tgt.probs, net.config), cfg.comal_anchors, 9 ^ 0x7a5d).item();
  CHECK(t.ce_source == doctest::Approx(ws).epsilon(1e-12));
  CHECK(t.ce_target == doctest::Approx(wt).epsilon(1e-12));
  CHECK(t.comal_source == doctest::Approx(cs).epsilon(1e-12));
  CHECK(t.comal_target == doctest::Approx(ct).epsilon(1e-12));
  CHECK(t.total.item() == doctest::Approx(ws + wt + 0.25 * (cs + ct)).epsilon(1e-12));
}

TEST_CASE("comal objective skips a fully ignored target") {
  Rng rng(8);
  const std::size_t C = world::kNumClasses;
  const auto net = costruct::init_structnet(3, tiny_struct());
  std::vector<world::LabelMap> lab(1, world::LabelMap(4, 4, 2));
  const auto src = from_logits(testutil::random_tensor({1, 4, 4, C}, rng));
  const auto tgt = from_logits(Tensor::zeros({1, 4, 4, C}));
  LossConfig cfg;
  const auto t = objective_comal(src, lab, tgt, net, uniform_distribution(C), cfg, 1);
  CHECK(t.target_skipped);
  CHECK(t.ce_target == 0.0);
}

TEST_CASE("comal objective gradient matches finite differences") {
  Rng rng(9);
  const std::size_t C = world::kNumClasses;
  const auto net = costruct::init_structnet(3, tiny_struct());
  std::vector<world::LabelMap> lab(1, world::LabelMap(4, 4));
  for (auto& v : lab[0].labels) v = static_cast<std::uint8_t>(rng.below(C));
  const std::vector<double> q = {0.3, 0.2, 0.2, 0.1, 0.1, 0.05, 0.04, 0.01};
  LossConfig cfg;
  cfg.lambda_comal = 0.5;
  cfg.pseudo_threshold = 0.5;
  // well separated target logits keep the pseudo labels fixed under perturbation
  Tensor tl = testutil::random_tensor({1, 4, 4, C}, rng, false, 0.3);
  for (std::size_t i = 0; i < 16; ++i) tl.mutable_data()[i * C + (i % C)] += 6.0;
  auto f = [&](const Tensor& sl) {
    return objective_comal(from_logits(sl), lab, from_logits(tl + sl * 0.1), net, q, cfg, 3).total;
  };
  CHECK(nd::grad_check_error(f, testutil::random_tensor({1, 4, 4, C}, rng)) < 1e-4);
}

TEST_CASE("head classes dominate unweighted gradients and balance under class weights") {
  // 2 class-0 pixels, 30 class-1 pixels, each at 0.7 on its true class
  std::vector<std::uint8_t> v(32, 1);
  v[0] = v[1] = 0;
  const auto lab = labels_of(1, 32, v);
  std::vector<double> logits(64);
  const double gap = std::log(0.7 / 0.3);
  for (std::size_t i = 0; i < 32; ++i) logits[i * 2 + v[i]] = gap;
  auto per_class = [&](std::span<const double> w) {
    const Tensor x = Tensor::from({1, 1, 32, 2}, logits, true);
    nll_loss(nd::log_softmax(x, 3), as_targets(std::span(&lab, 1)), w).backward();
    const Tensor g = Tensor::from({1, 1, 32, 2}, std::vector<double>(x.grad().begin(), x.grad().end()));
    return eval::group_gradients(g, std::span(&lab, 1), eval::GradAggregation::kSum);
  };
  const auto plain = per_class({});
  CHECK(plain[1] > plain[0]);
  const std::vector<double> q = {2.0 / 32.0, 30.0 / 32.0};
  const auto balanced = per_class(class_weights(q, {}, 10.0));
  CHECK(std::abs(balanced[0] - balanced[1]) < 1e-12);
}

TEST_CASE("class-balanced comal objective spreads gradient more evenly over classes") {
  const auto net = costruct::init_structnet(3, tiny_struct());
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto src = scenes(seed * 100, 4, world::Domain::kSource);
    const auto tgt = scenes(seed * 100 + 50, 4, world::Domain::kTarget);
    const auto q = world::class_histogram(src.labels);
    const auto params = seg::init(seed);
    LossConfig cfg;
    const auto target_out = seg::forward(params, tgt.batch);
    const eval::SegLoss comal = [&](const seg::SegOutput& o) {
      return objective_comal(o, src.labels, target_out, net, q, cfg, seed).total;
    };
    const eval::SegLoss plain = [&](const seg::SegOutput& o) {
      return nll_loss(o.log_probs, as_targets(std::span<const world::LabelMap>(src.labels)));
    };
    const double a = eval::nonzero_std(eval::grad_per_class(params, src.batch, src.labels, comal));
    const double b = eval::nonzero_std(eval::grad_per_class(params, src.batch, src.labels, plain));
    CHECK(a < b);
  }
}
