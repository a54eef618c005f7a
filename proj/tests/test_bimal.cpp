#include <algorithm>
#include <cmath>
#include <numbers>

#include "comal/bimal/bimal.hpp"
#include "comal/bimal/flow.hpp"
#include "comal/ndgrad/grad_check.hpp"
#include "comal/ndgrad/ops.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace comal;
using namespace comal::bimal;
using nd::Tensor;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

// log|det| of a square row-major matrix by partial-pivot elimination.
double log_abs_det(std::vector<double> a, std::size_t n) {
  double acc = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(a[i * n + k]) > std::abs(a[piv * n + k])) piv = i;
    if (piv != k)
      for (std::size_t j = 0; j < n; ++j) std::swap(a[k * n + j], a[piv * n + j]);
    const double p = a[k * n + k];
    acc += std::log(std::abs(p));
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = a[i * n + k] / p;
      for (std::size_t j = k; j < n; ++j) a[i * n + j] -= f * a[k * n + j];
    }
  }
  return acc;
}

double fd_log_det(const FlowModel& m, const std::vector<double>& v, double h = 1e-5) {
  const std::size_t d = v.size();
  std::vector<double> jac(d * d);
  for (std::size_t j = 0; j < d; ++j) {
    auto p = v, q = v;
    p[j] += h;
    q[j] -= h;
    const Tensor tp = m.forward(Tensor::from({1, d}, p)).z;
    const Tensor tq = m.forward(Tensor::from({1, d}, q)).z;
    const auto zp = tp.data(), zq = tq.data();
    for (std::size_t i = 0; i < d; ++i) jac[i * d + j] = (zp[i] - zq[i]) / (2 * h);
  }
  return log_abs_det(jac, d);
}

std::vector<world::LabelMap> maps(std::uint64_t first, std::size_t n, std::size_t size) {
  world::WorldConfig cfg;
  cfg.height = size;
  cfg.width = size;
  std::vector<world::LabelMap> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(world::generate_labels(first + i, cfg));
  return out;
}

FlowConfig small_flow(std::size_t d) {
  FlowConfig c;
  c.dim = d;
  c.hidden = 16;
  return c;
}

}  // namespace

TEST_CASE("relaxing a one-hot two-class pixel") {
  const Tensor v = relax(Tensor::from({1, 1, 2}, {1.0, 0.0}), 0.02);
  CHECK(v.data()[0] == doctest::Approx(std::log(0.99)).epsilon(1e-14));
  CHECK(v.data()[1] == doctest::Approx(std::log(0.01)).epsilon(1e-14));
}

TEST_CASE("relaxing a uniform pixel gives equal components") {
  const Tensor v = relax(Tensor::full({1, 1, 4}, 0.25), 0.02);
  for (double x : v.data()) CHECK(x == v.data()[0]);
}

TEST_CASE("relax then unrelax preserves argmax") {
  Rng rng(3);
  const Tensor y = testutil::random_simplex({2, 3, 3, 5}, rng);
  const Tensor back = unrelax(relax(y, 0.02), 3, 3, 5, 0.02);
  for (std::size_t p = 0; p < 18; ++p) {
    const auto a = y.data().subspan(p * 5, 5), b = back.data().subspan(p * 5, 5);
    CHECK(std::max_element(a.begin(), a.end()) - a.begin() ==
          std::max_element(b.begin(), b.end()) - b.begin());
    for (std::size_t c = 0; c < 5; ++c) CHECK(b[c] == doctest::Approx(a[c]).epsilon(1e-12));
  }
}

TEST_CASE("relaxation rejects out-of-range smoothing") {
  CHECK_THROWS(relax(Tensor::full({1, 1, 4}, 0.25), 0.0));
  CHECK_THROWS(relax(Tensor::full({1, 1, 4}, 0.25), 0.3));
}

TEST_CASE("identity-initialized flow only permutes") {
  const std::size_t d = 10;
  FlowModel m(small_flow(d), 1);
  Rng rng(2);
  const Tensor v = testutil::random_tensor({1, d}, rng);
  const auto r = m.forward(v);
  CHECK(r.logdet.item() == 0.0);
  std::vector<double> expect(v.data().begin(), v.data().end());
  for (const auto& layer : m.couplings()) {
    std::vector<double> next(d);
    for (std::size_t j = 0; j < d; ++j) next[j] = expect[layer.permutation[j]];
    expect = next;
  }
  for (std::size_t j = 0; j < d; ++j) CHECK(r.z.data()[j] == expect[j]);
  // and the inverse undoes exactly that permutation
  const Tensor back = m.inverse(r.z);
  for (std::size_t j = 0; j < d; ++j) CHECK(back.data()[j] == v.data()[j]);
}

TEST_CASE("a constant scaling layer contributes d*s to the log-determinant") {
  const std::size_t d = 6;
  FlowModel m(small_flow(d), 1);
  const double s = 0.37;
  std::fill(m.log_scale().mutable_data().begin(), m.log_scale().mutable_data().end(), s);
  Rng rng(1);
  CHECK(m.forward(testutil::random_tensor({3, d}, rng)).logdet.data()[1] ==
        doctest::Approx(d * s).epsilon(1e-14));
}

TEST_CASE("random flows invert and match the finite-difference Jacobian") {
  for (std::size_t d : {4, 8, 12}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      FlowModel m(small_flow(d), seed, FlowInit::kRandom);
      Rng rng(seed + 100);
      const Tensor v = testutil::random_tensor({1, d}, rng);
      const auto r = m.forward(v);
      const Tensor back = m.inverse(r.z);
      for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(back.data()[j] - v.data()[j]) < 1e-5);
      const double fd = fd_log_det(m, {v.data().begin(), v.data().end()});
      CHECK(std::abs(fd - r.logdet.item()) / std::max(1.0, std::abs(fd)) < 1e-3);
    }
  }
}

TEST_CASE("log-determinant equals the sum of scale outputs") {
  const std::size_t d = 6;
  FlowModel m(small_flow(d), 4, FlowInit::kRandom);
  Rng rng(4);
  const Tensor v = testutil::random_tensor({1, d}, rng);
  double total = 0.0;
  for (double s : m.log_scale().data()) total += s;
  Tensor h = v * nd::exp(m.log_scale()) + m.bias();
  for (const auto& layer : m.couplings()) {
    const Tensor pass = nd::index_select(h, 1, layer.pass);
    const Tensor raw = layer.scale(pass);
    const Tensor s = nd::tanh(raw * 0.5) * 2.0;  // soft clamp at 2
    for (double x : s.data()) total += x;
    const Tensor moved = nd::index_select(h, 1, layer.transformed) * nd::exp(s) + layer.shift(pass);
    std::vector<double> merged(d);
    for (std::size_t i = 0; i < layer.pass.size(); ++i) merged[layer.pass[i]] = pass.data()[i];
    for (std::size_t i = 0; i < layer.transformed.size(); ++i) merged[layer.transformed[i]] = moved.data()[i];
    std::vector<double> out(d);
    for (std::size_t j = 0; j < d; ++j) out[j] = merged[layer.permutation[j]];
    h = Tensor::from({1, d}, out);
  }
  const auto r = m.forward(v);
  CHECK(r.logdet.item() == doctest::Approx(total).epsilon(1e-12));
  for (std::size_t j = 0; j < d; ++j) CHECK(r.z.data()[j] == doctest::Approx(h.data()[j]).epsilon(1e-12));
}

TEST_CASE("standard normal log density") {
  CHECK(prior_logprob(Tensor::zeros({1, 4})).item() == doctest::Approx(-2.0 * kLog2Pi).epsilon(1e-14));
  CHECK(prior_logprob(Tensor::full({1, 4}, 1.0)).item() ==
        doctest::Approx(-2.0 * kLog2Pi - 2.0).epsilon(1e-14));
}

TEST_CASE("Monte-Carlo negative log density approaches the Gaussian entropy") {
  Rng rng(77);
  const std::size_t n = 100000, d = 8;
  std::vector<double> z(n * d);
  for (auto& x : z) x = rng.normal();
  const Tensor lp = prior_logprob(Tensor::from({n, d}, std::move(z)));
  double mean = 0.0;
  for (double v : lp.data()) mean -= v;
  mean /= static_cast<double>(n);
  const double entropy = d / 2.0 * (1.0 + kLog2Pi);
  CHECK(std::abs(mean - entropy) / entropy < 0.01);
}

TEST_CASE("nll of the identity flow at the origin") {
  FlowModel m(small_flow(6), 0);
  CHECK(nll(m, Tensor::zeros({1, 6})).item() == doctest::Approx(3.0 * kLog2Pi).epsilon(1e-14));
}

TEST_CASE("scaling the input while holding z fixed lowers nll by d*s") {
  const std::size_t d = 6;
  const double s = 0.8;
  FlowModel plain(small_flow(d), 3);
  FlowModel scaled(small_flow(d), 3);
  std::fill(scaled.log_scale().mutable_data().begin(), scaled.log_scale().mutable_data().end(), s);
  Rng rng(5);
  const Tensor v = testutil::random_tensor({1, d}, rng);
  const double a = nll(plain, v).item();
  const double b = nll(scaled, v * std::exp(-s)).item();
  CHECK(a - b == doctest::Approx(d * s).epsilon(1e-12));
}

TEST_CASE("flow likelihood matches central differences") {
  FlowModel m(small_flow(8), 9, FlowInit::kRandom);
  Rng rng(9);
  auto f = [&](const Tensor& v) { return nd::sum(nll(m, v)); };
  CHECK(nd::grad_check_error(f, testutil::random_tensor({1, 8}, rng)) < 1e-4);
}

TEST_CASE("tau examples") {
  const Tensor same_img = Tensor::from({1, 1, 2, 3}, {0.2, 0.4, 0.6, 0.2, 0.4, 0.6});
  const Tensor y = Tensor::from({1, 1, 2, 2}, {0.7, 0.3, 0.7, 0.3});
  CHECK(tau(same_img, y, 0.5, 0.5, TauForm::kPaper).item() == doctest::Approx(2.0).epsilon(1e-14));
  const Tensor far_img = Tensor::from({1, 1, 2, 3}, {0.0, 0.0, 0.0, 1.0, 0.0, 0.0});
  CHECK(tau(far_img, y, 1.0, 0.5, TauForm::kPaper).item() ==
        doctest::Approx(2.0 * std::exp(-0.5)).epsilon(1e-14));
  CHECK(tau(Tensor::zeros({1, 1, 1, 3}), Tensor::full({1, 1, 1, 2}, 0.5), 0.5, 0.5,
            TauForm::kPaper).item() == 0.0);
  // agreeing neighbors cost nothing in the bilateral form
  CHECK(tau(same_img, y, 0.5, 0.5, TauForm::kBilateral).item() == 0.0);
  CHECK_THROWS(tau(same_img, y, 0.0, 0.5, TauForm::kPaper));
  CHECK_THROWS(tau(same_img, y, 0.5, -1.0, TauForm::kBilateral));
}

TEST_CASE("bilateral tau decreases as neighbors agree") {
  const Tensor img = Tensor::zeros({1, 1, 2, 3});
  double prev = 1e9;
  for (double p : {0.0, 0.25, 0.5}) {
    const Tensor y = Tensor::from({1, 1, 2, 2}, {1.0, 0.0, p, 1.0 - p});
    const double t = tau(img, y, 0.5, 0.5, TauForm::kBilateral).item();
    CHECK(t < prev);
    prev = t;
  }
}

TEST_CASE("bimal loss decomposes into nll plus tau") {
  FlowModel m(small_flow(2 * 2 * 3), 2, FlowInit::kRandom);
  Rng rng(6);
  const Tensor y = testutil::random_simplex({2, 4, 4, 3}, rng);
  const Tensor img = testutil::random_tensor({2, 4, 4, 3}, rng, false, 1.0);
  const BimalSettings s;
  const auto t = bimal_terms(m, img, y, s);
  double expect = 0.0;
  for (std::size_t b = 0; b < 2; ++b) expect += t.nll.data()[b] + t.tau.data()[b];
  CHECK(bimal_loss(m, img, y, s).item() == expect / 2.0);
}

TEST_CASE("bimal loss gradient through softmax logits") {
  FlowModel m(small_flow(2 * 2 * 3), 2, FlowInit::kRandom);
  Rng rng(7);
  const Tensor img = testutil::random_tensor({1, 4, 4, 3}, rng, false, 1.0);
  for (TauForm form : {TauForm::kPaper, TauForm::kBilateral}) {
    BimalSettings s;
    s.form = form;
    auto f = [&](const Tensor& logits) { return bimal_loss(m, img, nd::softmax(logits, 3), s); };
    CHECK(nd::grad_check_error(f, testutil::random_tensor({1, 4, 4, 3}, rng)) < 1e-4);
  }
}

TEST_CASE("train_flow with zero epochs leaves the model untouched") {
  FlowModel m(small_flow(8), 1, FlowInit::kRandom);
  const auto before = m.named();
  Rng rng(1);
  FlowTrainOptions o;
  o.epochs = 0;
  train_flow(m, testutil::random_tensor({10, 8}, rng), o);
  const auto after = m.named();
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto a = before[i].second.data(), b = after[i].second.data();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST_CASE("a single sample's nll falls at every one of the first 50 steps") {
  FlowModel m(small_flow(8), 1);
  Rng rng(2);
  FlowTrainOptions o;
  o.epochs = 50;
  o.batch = 1;
  o.data_init = false;
  const auto rep = train_flow(m, testutil::random_tensor({1, 8}, rng), o);
  for (std::size_t i = 1; i < rep.epoch_nll.size(); ++i) CHECK(rep.epoch_nll[i] < rep.epoch_nll[i - 1]);
}

TEST_CASE("divergence is reported with its iteration") {
  FlowModel m(small_flow(4), 1);
  FlowTrainOptions o;
  o.epochs = 1;
  o.data_init = false;
  try {
    train_flow(m, Tensor::full({4, 4}, 1e160), o);
    FAIL("expected divergence");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("iteration 0") != std::string::npos);
  }
}

TEST_CASE("flow trained on scene maps generalizes and prefers real maps") {
  BimalSettings s;
  const auto train = maps(0, 256, 16);
  const auto held = maps(10000, 64, 16);
  FlowModel m(flow_config_for(16, 16, s), 3);
  const Tensor held_codes = relaxed_codes(held, s);
  const double before = mean_nll(m, held_codes);
  FlowTrainOptions o;
  o.epochs = 4;
  train_flow(m, relaxed_codes(train, s), o);
  const double after = mean_nll(m, held_codes);
  CHECK((before - after) / std::abs(before) >= 0.2);

  // ground truth versus uniformly random simplex maps
  Rng rng(8);
  const Tensor gt = one_hot(held, world::kNumClasses);
  const Tensor noise = testutil::random_simplex(gt.shape(), rng);
  world::WorldConfig wc;
  wc.height = wc.width = 16;
  std::vector<world::Image> imgs;
  for (std::size_t i = 0; i < held.size(); ++i) imgs.push_back(world::generate(10000 + i, world::Domain::kSource, wc).image);
  std::vector<const world::Image*> ptrs;
  for (const auto& im : imgs) ptrs.push_back(&im);
  const Tensor img = images_nhwc(ptrs);
  CHECK(bimal_loss(m, img, gt, s).item() < bimal_loss(m, img, noise, s).item());
  CHECK(uds_estimate(m, img, gt, s) <= uds_estimate(m, img, noise, s));
}

TEST_CASE("uds of a single sample mapped to the origin") {
  BimalSettings s;
  Rng rng(4);
  const Tensor y = testutil::random_simplex({1, 4, 4, 3}, rng);
  const Tensor img = testutil::random_tensor({1, 4, 4, 3}, rng, false, 1.0);
  FlowModel m(small_flow(12), 0);
  const Tensor code = relax(subsample_map(y, 2), s.eps);
  for (std::size_t i = 0; i < 12; ++i) m.bias().mutable_data()[i] = -code.data()[i];
  const double t = tau(img, y, s.sigma1, s.sigma2, s.form).item();
  CHECK(uds_estimate(m, img, y, s) == doctest::Approx(6.0 * kLog2Pi + t).epsilon(1e-12));
}

TEST_CASE("uds is a sample mean") {
  BimalSettings s;
  Rng rng(5);
  FlowModel m(small_flow(12), 0, FlowInit::kRandom);
  const Tensor y = testutil::random_simplex({3, 4, 4, 3}, rng);
  const Tensor img = testutil::random_tensor({3, 4, 4, 3}, rng, false, 1.0);
  const double base = uds_estimate(m, nd::slice(img, 0, 0, 2), nd::slice(y, 0, 0, 2), s);
  // a one-hot map far from everything has higher nll than the average
  std::vector<double> hot(4 * 4 * 3, 0.0);
  for (std::size_t p = 0; p < 16; ++p) hot[p * 3 + (p % 3)] = 1.0;
  const Tensor bad = Tensor::from({1, 4, 4, 3}, hot);
  const double bad_score = uds_estimate(m, nd::slice(img, 0, 2, 3), bad, s);
  REQUIRE(bad_score > base);
  const double both = uds_estimate(m, nd::slice(img, 0, 0, 3),
                                   nd::concat({nd::slice(y, 0, 0, 2), bad}, 0), s);
  CHECK(both > base);
  CHECK(both == doctest::Approx((2 * base + bad_score) / 3.0).epsilon(1e-12));
  CHECK_THROWS(uds_estimate(m, Tensor::zeros({0, 4, 4, 3}), Tensor::zeros({0, 4, 4, 3}), s));
}
