#include "comal/bimal/bimal.hpp"

#include <cmath>
#include <stdexcept>

#include "comal/ndgrad/ops.hpp"

namespace comal::bimal {

namespace {

void check_eps(double eps, std::size_t classes) {
  if (!(eps > 0.0) || !(eps < 1.0 / static_cast<double>(classes))) {
    throw std::invalid_argument("relax: smoothing must lie in (0, 1/C), got " +
                                std::to_string(eps));
  }
}

// Constant colour affinity exp(-|x_a - x_b|^2 / 2 s^2) for pairs offset by
// (di, dj); output is [B, H - di, W - dj].
nd::Tensor colour_affinity(const nd::Tensor& image, std::size_t di, std::size_t dj,
                           double sigma) {
  const auto& s = image.shape();
  const std::size_t B = s[0], H = s[1], W = s[2];
  const std::size_t oh = H - di, ow = W - dj;
  std::vector<double> out(B * oh * ow);
  const double* x = image.data().data();
  const double k = -1.0 / (2.0 * sigma * sigma);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const double* p = x + ((b * H + i) * W + j) * 3;
        const double* q = x + ((b * H + i + di) * W + j + dj) * 3;
        double d2 = 0.0;
        for (int c = 0; c < 3; ++c) d2 += (p[c] - q[c]) * (p[c] - q[c]);
        out[(b * oh + i) * ow + j] = std::exp(k * d2);
      }
    }
  }
  return nd::Tensor::from({B, oh, ow}, std::move(out));
}

nd::Tensor pair_term(const nd::Tensor& image, const nd::Tensor& y, int axis, double sigma1,
                     double sigma2, TauForm form) {
  const std::size_t B = y.shape()[0];
  const std::size_t n = y.shape()[axis];
  nd::Tensor dy = nd::slice(y, axis, 1, n) - nd::slice(y, axis, 0, n - 1);
  nd::Tensor agree = nd::exp(nd::sum(dy * dy, 3) * (-1.0 / (2.0 * sigma2 * sigma2)));
  nd::Tensor w = colour_affinity(image, axis == 1 ? 1 : 0, axis == 2 ? 1 : 0, sigma1);
  nd::Tensor term = form == TauForm::kPaper ? w * agree : w * (agree * -1.0 + 1.0);
  // Each unordered pair appears twice among ordered pairs.
  return nd::sum(nd::reshape(term, {B, term.numel() / B}), 1) * 2.0;
}

}  // namespace

nd::Tensor relax(const nd::Tensor& y, double eps) {
  if (y.rank() != 3 && y.rank() != 4) throw nd::ShapeError("relax expects [B,]H,W,C, got " + nd::shape_str(y.shape()));
  const std::size_t C = y.shape().back();
  check_eps(eps, C);
  nd::Tensor v = nd::log(y * (1.0 - eps) + eps / static_cast<double>(C));
  if (y.rank() == 3) return nd::reshape(v, {y.numel()});
  return nd::reshape(v, {y.shape()[0], y.numel() / y.shape()[0]});
}

nd::Tensor unrelax(const nd::Tensor& v, std::size_t height, std::size_t width,
                   std::size_t classes, double eps) {
  check_eps(eps, classes);
  const std::size_t per = height * width * classes;
  if (per == 0 || v.numel() % per != 0) {
    throw nd::ShapeError("unrelax", v.shape(), {height, width, classes});
  }
  const double floor = eps / static_cast<double>(classes);
  return nd::reshape((nd::exp(v) - floor) * (1.0 / (1.0 - eps)),
                     {v.numel() / per, height, width, classes});
}

nd::Tensor one_hot(std::span<const world::LabelMap> labels, std::size_t classes) {
  if (labels.empty()) throw std::invalid_argument("one_hot: empty batch");
  const std::size_t H = labels[0].height, W = labels[0].width;
  std::vector<double> out(labels.size() * H * W * classes, 0.0);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b].height != H || labels[b].width != W) {
      throw nd::ShapeError("one_hot", {H, W}, {labels[b].height, labels[b].width});
    }
    for (std::size_t p = 0; p < H * W; ++p) {
      const std::size_t c = labels[b].labels[p];
      if (c >= classes) throw std::out_of_range("one_hot: label out of range");
      out[(b * H * W + p) * classes + c] = 1.0;
    }
  }
  return nd::Tensor::from({labels.size(), H, W, classes}, std::move(out));
}

nd::Tensor subsample_map(const nd::Tensor& y, std::size_t stride) {
  if (stride == 0) throw std::invalid_argument("subsample_map: stride must be positive");
  if (stride == 1) return y;
  if (y.rank() != 4) throw nd::ShapeError("subsample_map expects [B,H,W,C], got " + nd::shape_str(y.shape()));
  auto picks = [stride](std::size_t n) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; i += stride) idx.push_back(i);
    return idx;
  };
  nd::Tensor rows = nd::index_select(y, 1, picks(y.shape()[1]));
  return nd::index_select(rows, 2, picks(y.shape()[2]));
}

nd::Tensor images_nhwc(std::span<const world::Image* const> images) {
  if (images.empty()) throw std::invalid_argument("images_nhwc: empty batch");
  const std::size_t H = images[0]->height, W = images[0]->width;
  std::vector<double> data;
  data.reserve(images.size() * H * W * 3);
  for (const auto* img : images) {
    if (img->height != H || img->width != W) {
      throw nd::ShapeError("images_nhwc", {H, W}, {img->height, img->width});
    }
    data.insert(data.end(), img->rgb.begin(), img->rgb.end());
  }
  return nd::Tensor::from({images.size(), H, W, 3}, std::move(data));
}

TauForm parse_tau_form(const std::string& name) {
  if (name == "paper") return TauForm::kPaper;
  if (name == "bilateral") return TauForm::kBilateral;
  throw std::invalid_argument("unknown tau form '" + name + "' (expected paper|bilateral)");
}

std::string tau_form_name(TauForm form) {
  return form == TauForm::kPaper ? "paper" : "bilateral";
}

nd::Tensor tau(const nd::Tensor& image, const nd::Tensor& y, double sigma1, double sigma2,
               TauForm form) {
  if (!(sigma1 > 0.0) || !(sigma2 > 0.0)) {
    throw std::invalid_argument("tau: sigma values must be positive");
  }
  if (y.rank() != 4 || image.rank() != 4 || image.shape()[3] != 3 ||
      image.shape()[0] != y.shape()[0] || image.shape()[1] != y.shape()[1] ||
      image.shape()[2] != y.shape()[2]) {
    throw nd::ShapeError("tau", image.shape(), y.shape());
  }
  const std::size_t B = y.shape()[0], H = y.shape()[1], W = y.shape()[2];
  nd::Tensor total = nd::Tensor::zeros({B});
  if (W > 1) total = total + pair_term(image, y, 2, sigma1, sigma2, form);
  if (H > 1) total = total + pair_term(image, y, 1, sigma1, sigma2, form);
  return total;
}

BimalTerms bimal_terms(const FlowModel& model, const nd::Tensor& image, const nd::Tensor& y,
                       const BimalSettings& settings) {
  BimalTerms t;
  nd::Tensor code = relax(subsample_map(y, settings.stride), settings.eps);
  if (code.shape()[1] != model.dim()) {
    throw nd::ShapeError("bimal: flow dimension", {model.dim()}, {code.shape()[1]});
  }
  t.nll = nll(model, code);
  t.tau = settings.use_tau
              ? tau(image, y, settings.sigma1, settings.sigma2, settings.form)
              : nd::Tensor::zeros({y.shape()[0]});
  return t;
}

nd::Tensor bimal_loss(const FlowModel& model, const nd::Tensor& image, const nd::Tensor& y,
                      const BimalSettings& settings) {
  const auto t = bimal_terms(model, image, y, settings);
  return nd::mean(t.nll + t.tau);
}

double uds_estimate(const FlowModel& model, const nd::Tensor& images, const nd::Tensor& y,
                    const BimalSettings& settings) {
  if (y.rank() != 4 || y.shape()[0] == 0) {
    throw std::invalid_argument("uds_estimate: no predictions given");
  }
  nd::NoGradGuard no_grad;
  const std::size_t N = y.shape()[0];
  double total = 0.0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < N; start += kChunk) {
    const std::size_t end = std::min(N, start + kChunk);
    const auto terms = bimal_terms(model, nd::slice(images, 0, start, end),
                                   nd::slice(y, 0, start, end), settings);
    for (std::size_t i = 0; i < end - start; ++i) {
      total += terms.nll.data()[i] + terms.tau.data()[i];
    }
  }
  return total / static_cast<double>(N);
}

nd::Tensor relaxed_codes(std::span<const world::LabelMap> labels, const BimalSettings& settings,
                         std::size_t classes) {
  nd::NoGradGuard no_grad;
  return relax(subsample_map(one_hot(labels, classes), settings.stride), settings.eps);
}

FlowConfig flow_config_for(std::size_t height, std::size_t width, const BimalSettings& settings,
                           std::size_t classes) {
  const std::size_t s = settings.stride;
  FlowConfig cfg;
  cfg.dim = ((height + s - 1) / s) * ((width + s - 1) / s) * classes;
  return cfg;
}

}  // namespace comal::bimal
