#include "comal/ndgrad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace comal::nd {

namespace {

double g_log_clamp = 1e-12;

using detail::Node;

std::size_t norm_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(axis);
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Maps an output linear index to input linear indices under broadcasting.
struct Broadcast {
  enum class Mode { kSame, kScalarB, kScalarA, kSuffixB, kSuffixA, kGeneral };
  Mode mode = Mode::kSame;
  Shape out;
  std::size_t na = 0, nb = 0;
  std::vector<std::size_t> ia, ib;  // only for kGeneral

  std::size_t a(std::size_t i) const {
    switch (mode) {
      case Mode::kSame:
      case Mode::kScalarB:
      case Mode::kSuffixB:
        return i;
      case Mode::kScalarA:
        return 0;
      case Mode::kSuffixA:
        return i % na;
      default:
        return ia[i];
    }
  }
  std::size_t b(std::size_t i) const {
    switch (mode) {
      case Mode::kSame:
      case Mode::kScalarA:
      case Mode::kSuffixA:
        return i;
      case Mode::kScalarB:
        return 0;
      case Mode::kSuffixB:
        return i % nb;
      default:
        return ib[i];
    }
  }
};

bool is_suffix(const Shape& big, const Shape& small) {
  std::size_t k = 0;
  while (k < small.size() && small[k] == 1) ++k;
  const std::size_t len = small.size() - k;
  if (len > big.size()) return false;
  return std::equal(small.begin() + static_cast<long>(k), small.end(),
                    big.end() - static_cast<long>(len));
}

Broadcast plan_broadcast(const char* op, const Shape& sa, const Shape& sb) {
  Broadcast bc;
  bc.na = numel_of(sa);
  bc.nb = numel_of(sb);
  if (sa == sb) {
    bc.out = sa;
    bc.mode = Broadcast::Mode::kSame;
    return bc;
  }
  const std::size_t r = std::max(sa.size(), sb.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(sa.begin(), sa.end(), pa.begin() + static_cast<long>(r - sa.size()));
  std::copy(sb.begin(), sb.end(), pb.begin() + static_cast<long>(r - sb.size()));
  bc.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] == pb[i] || pb[i] == 1) {
      bc.out[i] = pa[i];
    } else if (pa[i] == 1) {
      bc.out[i] = pb[i];
    } else {
      throw ShapeError(op, sa, sb);
    }
  }
  const std::size_t nout = numel_of(bc.out);
  if (bc.nb == 1 && bc.na == nout) {
    bc.mode = Broadcast::Mode::kScalarB;
  } else if (bc.na == 1 && bc.nb == nout) {
    bc.mode = Broadcast::Mode::kScalarA;
  } else if (bc.na == nout && is_suffix(sa, sb)) {
    bc.mode = Broadcast::Mode::kSuffixB;
  } else if (bc.nb == nout && is_suffix(sb, sa)) {
    bc.mode = Broadcast::Mode::kSuffixA;
  } else {
    bc.mode = Broadcast::Mode::kGeneral;
    std::vector<std::size_t> stra(r, 0), strb(r, 0);
    std::size_t acc_a = 1, acc_b = 1;
    for (std::size_t i = r; i-- > 0;) {
      stra[i] = pa[i] == 1 ? 0 : acc_a;
      strb[i] = pb[i] == 1 ? 0 : acc_b;
      acc_a *= pa[i];
      acc_b *= pb[i];
    }
    bc.ia.resize(nout);
    bc.ib.resize(nout);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t lin = 0; lin < nout; ++lin) {
      std::size_t oa = 0, ob = 0;
      for (std::size_t d = 0; d < r; ++d) {
        oa += idx[d] * stra[d];
        ob += idx[d] * strb[d];
      }
      bc.ia[lin] = oa;
      bc.ib[lin] = ob;
      for (std::size_t d = r; d-- > 0;) {
        if (++idx[d] < bc.out[d]) break;
        idx[d] = 0;
      }
    }
  }
  return bc;
}

template <class F, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA da,
              DB db) {
  auto bc = std::make_shared<Broadcast>(plan_broadcast(op, a.shape(), b.shape()));
  const std::size_t n = numel_of(bc->out);
  std::vector<double> out(n);
  const auto& xa = a.node()->data;
  const auto& xb = b.node()->data;
  if (bc->mode == Broadcast::Mode::kSame) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(xa[i], xb[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(xa[bc->a(i)], xb[bc->b(i)]);
  }
  return make_op(op, bc->out, std::move(out), {a, b},
                 [bc, da, db](Node& self) {
                   Node& na = *self.parents[0];
                   Node& nb = *self.parents[1];
                   const auto& g = self.grad;
                   const std::size_t n = g.size();
                   if (na.requires_grad) {
                     auto& ga = na.ensure_grad();
                     for (std::size_t i = 0; i < n; ++i) {
                       const std::size_t ia = bc->a(i), ib = bc->b(i);
                       ga[ia] += g[i] * da(na.data[ia], nb.data[ib], self.data[i]);
                     }
                   }
                   if (nb.requires_grad) {
                     auto& gb = nb.ensure_grad();
                     for (std::size_t i = 0; i < n; ++i) {
                       const std::size_t ia = bc->a(i), ib = bc->b(i);
                       gb[ib] += g[i] * db(na.data[ia], nb.data[ib], self.data[i]);
                     }
                   }
                 });
}

template <class F, class D>
Tensor unary(const char* op, const Tensor& a, F f, D d) {
  const auto& x = a.node()->data;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return make_op(op, a.shape(), std::move(out), {a}, [d](Node& self) {
    Node& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) {
      gp[i] += self.grad[i] * d(p.data[i], self.data[i]);
    }
  });
}

// Dot product with four independent accumulators; fixed summation order.
inline double dot(const double* x, const double* y, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += x[i] * y[i];
    s1 += x[i + 1] * y[i + 1];
    s2 += x[i + 2] * y[i + 2];
    s3 += x[i + 3] * y[i + 3];
  }
  for (; i < n; ++i) s0 += x[i] * y[i];
  return (s0 + s1) + (s2 + s3);
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

double log_clamp() { return g_log_clamp; }
void set_log_clamp(double eps) { g_log_clamp = eps; }

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0) throw std::domain_error("div: division by zero");
  }
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Tensor neg(const Tensor& a) {
  return unary(
      "neg", a, [](double x) { return -x; },
      [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      "add_scalar", a, [s](double x) { return x + s; },
      [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary(
      "mul_scalar", a, [s](double x) { return x * s; },
      [s](double, double) { return s; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  const double eps = g_log_clamp;
  if (eps <= 0.0) {
    for (double v : a.data()) {
      if (v <= 0.0) throw std::domain_error("log: non-positive argument");
    }
  }
  // Below the clamp the function is constant, so its derivative is zero.
  return unary(
      "log", a, [eps](double x) { return std::log(std::max(x, eps)); },
      [eps](double x, double) { return x < eps ? 0.0 : 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor pow(const Tensor& a, double exponent) {
  return unary(
      "pow", a, [exponent](double x) { return std::pow(x, exponent); },
      [exponent](double x, double) {
        return exponent * std::pow(x, exponent - 1.0);
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.shape()[0]) {
    throw ShapeError("matmul", a.shape(), b.shape());
  }
  const std::size_t k = b.shape()[0];
  const std::size_t n = b.shape()[1];
  const std::size_t m = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.node()->data.data();
  const double* pb = b.node()->data.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = pa[i * k + t];
      if (av != 0.0) axpy(av, pb + t * n, row, n);
    }
  }
  return make_op("matmul", std::move(out_shape), std::move(out), {a, b},
                 [m, k, n](Node& self) {
                   Node& na = *self.parents[0];
                   Node& nb = *self.parents[1];
                   const double* g = self.grad.data();
                   if (na.requires_grad) {
                     auto& ga = na.ensure_grad();
                     for (std::size_t i = 0; i < m; ++i) {
                       for (std::size_t t = 0; t < k; ++t) {
                         ga[i * k + t] += dot(g + i * n, nb.data.data() + t * n, n);
                       }
                     }
                   }
                   if (nb.requires_grad) {
                     auto& gb = nb.ensure_grad();
                     for (std::size_t i = 0; i < m; ++i) {
                       for (std::size_t t = 0; t < k; ++t) {
                         const double av = na.data[i * k + t];
                         if (av != 0.0) axpy(av, g + i * n, gb.data() + t * n, n);
                       }
                     }
                   }
                 });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t padding) {
  if (x.rank() != 4 || w.rank() != 4 || w.shape()[1] != x.shape()[1] ||
      w.shape()[2] != w.shape()[3]) {
    throw ShapeError("conv2d", x.shape(), w.shape());
  }
  const std::size_t B = x.shape()[0], Ci = x.shape()[1], H = x.shape()[2],
                    W = x.shape()[3];
  const std::size_t Co = w.shape()[0], K = w.shape()[2];
  if (H + 2 * padding < K || W + 2 * padding < K) {
    throw ShapeError("conv2d", x.shape(), w.shape());
  }
  const std::size_t Ho = H + 2 * padding - K + 1;
  const std::size_t Wo = W + 2 * padding - K + 1;
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.shape()[0] != Co)) {
    throw ShapeError("conv2d(bias)", bias.shape(), {Co});
  }
  std::vector<double> out(B * Co * Ho * Wo, 0.0);
  const double* px = x.node()->data.data();
  const double* pw = w.node()->data.data();
  const long pad = static_cast<long>(padding);

  // For output row oy and kernel row ky the input row is oy + ky - pad; the
  // valid output column range for kernel column kx is computed likewise.
  auto col_range = [&](std::size_t kx, std::size_t& x0, std::size_t& x1) {
    const long lo = pad - static_cast<long>(kx);
    const long hi = static_cast<long>(W) + pad - static_cast<long>(kx);
    x0 = static_cast<std::size_t>(std::max<long>(0, lo));
    x1 = static_cast<std::size_t>(std::min<long>(static_cast<long>(Wo), hi));
  };

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t co = 0; co < Co; ++co) {
      double* op = out.data() + (b * Co + co) * Ho * Wo;
      if (has_bias) std::fill(op, op + Ho * Wo, bias.node()->data[co]);
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* ip = px + (b * Ci + ci) * H * W;
        const double* wk = pw + ((co * Ci + ci) * K) * K;
        for (std::size_t ky = 0; ky < K; ++ky) {
          for (std::size_t kx = 0; kx < K; ++kx) {
            const double wv = wk[ky * K + kx];
            std::size_t x0, x1;
            col_range(kx, x0, x1);
            if (x0 >= x1) continue;
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const long iy = static_cast<long>(oy + ky) - pad;
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              const double* irow = ip + static_cast<std::size_t>(iy) * W + kx - padding;
              axpy(wv, irow + x0, op + oy * Wo + x0, x1 - x0);
            }
          }
        }
      }
    }
  }
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_op(
      "conv2d", {B, Co, Ho, Wo}, std::move(out), std::move(inputs),
      [=](Node& self) {
        Node& nx = *self.parents[0];
        Node& nw = *self.parents[1];
        const double* g = self.grad.data();
        double* gx = nx.requires_grad ? nx.ensure_grad().data() : nullptr;
        double* gw = nw.requires_grad ? nw.ensure_grad().data() : nullptr;
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t co = 0; co < Co; ++co) {
            const double* gp = g + (b * Co + co) * Ho * Wo;
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const std::size_t in_off = (b * Ci + ci) * H * W;
              const std::size_t w_off = ((co * Ci + ci) * K) * K;
              for (std::size_t ky = 0; ky < K; ++ky) {
                for (std::size_t kx = 0; kx < K; ++kx) {
                  std::size_t x0, x1;
                  const long lo = pad - static_cast<long>(kx);
                  const long hi = static_cast<long>(W) + pad - static_cast<long>(kx);
                  x0 = static_cast<std::size_t>(std::max<long>(0, lo));
                  x1 = static_cast<std::size_t>(std::min<long>(static_cast<long>(Wo), hi));
                  if (x0 >= x1) continue;
                  const double wv = nw.data[w_off + ky * K + kx];
                  double acc = 0.0;
                  for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const long iy = static_cast<long>(oy + ky) - pad;
                    if (iy < 0 || iy >= static_cast<long>(H)) continue;
                    const std::size_t irow =
                        in_off + static_cast<std::size_t>(iy) * W + kx - padding;
                    if (gw) acc += dot(gp + oy * Wo + x0, nx.data.data() + irow + x0, x1 - x0);
                    if (gx) axpy(wv, gp + oy * Wo + x0, gx + irow + x0, x1 - x0);
                  }
                  if (gw) gw[w_off + ky * K + kx] += acc;
                }
              }
            }
          }
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->ensure_grad();
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t co = 0; co < Co; ++co) {
              const double* gp = g + (b * Co + co) * Ho * Wo;
              double s = 0.0;
              for (std::size_t i = 0; i < Ho * Wo; ++i) s += gp[i];
              gb[co] += s;
            }
          }
        }
      });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op("sum", {}, {s}, {a}, [](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    const double g = self.grad[0];
    for (auto& v : gp) v += g;
  });
}

Tensor sum(const Tensor& a, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, a.rank(), "sum");
  const AxisSplit sp = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  }
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const auto& x = a.node()->data;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.n; ++j) {
      const double* src = x.data() + (o * sp.n + j) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  return make_op("sum_axis", std::move(out_shape), std::move(out), {a},
                 [sp](Node& self) {
                   auto& gp = self.parents[0]->ensure_grad();
                   for (std::size_t o = 0; o < sp.outer; ++o) {
                     for (std::size_t j = 0; j < sp.n; ++j) {
                       double* dst = gp.data() + (o * sp.n + j) * sp.inner;
                       const double* src = self.grad.data() + o * sp.inner;
                       for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
                     }
                   }
                 });
}

Tensor mean(const Tensor& a) {
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean(const Tensor& a, int axis, bool keepdim) {
  const std::size_t n = a.dim(axis);
  return mul_scalar(sum(a, axis, keepdim), 1.0 / static_cast<double>(n));
}

Tensor max(const Tensor& a, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, a.rank(), "max");
  const AxisSplit sp = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  }
  std::vector<double> out(sp.outer * sp.inner);
  auto arg = std::make_shared<std::vector<std::size_t>>(sp.outer * sp.inner);
  const auto& x = a.node()->data;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      double bv = x[o * sp.n * sp.inner + i];
      for (std::size_t j = 1; j < sp.n; ++j) {
        const double v = x[(o * sp.n + j) * sp.inner + i];
        if (v > bv) {
          bv = v;
          best = j;
        }
      }
      out[o * sp.inner + i] = bv;
      (*arg)[o * sp.inner + i] = (o * sp.n + best) * sp.inner + i;
    }
  }
  return make_op("max_axis", std::move(out_shape), std::move(out), {a},
                 [arg](Node& self) {
                   auto& gp = self.parents[0]->ensure_grad();
                   for (std::size_t i = 0; i < arg->size(); ++i) {
                     gp[(*arg)[i]] += self.grad[i];
                   }
                 });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape);
  return make_op("reshape", std::move(shape), a.node()->data, {a},
                 [](Node& self) {
                   auto& gp = self.parents[0]->ensure_grad();
                   for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
                 });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  if (axes.size() != r) throw ShapeError("permute", a.shape(), Shape(axes));
  std::vector<bool> used(r, false);
  for (auto ax : axes) {
    if (ax >= r || used[ax]) throw ShapeError("permute", a.shape(), Shape(axes));
    used[ax] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[axes[i]];
  std::vector<std::size_t> in_stride(r);
  std::size_t acc = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_stride[i] = acc;
    acc *= a.shape()[i];
  }
  const std::size_t n = a.numel();
  auto src_index = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t lin = 0; lin < n; ++lin) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < r; ++d) off += idx[d] * in_stride[axes[d]];
    (*src_index)[lin] = off;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.node()->data[(*src_index)[i]];
  return make_op("permute", std::move(out_shape), std::move(out), {a},
                 [src_index](Node& self) {
                   auto& gp = self.parents[0]->ensure_grad();
                   for (std::size_t i = 0; i < src_index->size(); ++i) {
                     gp[(*src_index)[i]] += self.grad[i];
                   }
                 });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: rank-2 expected, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = norm_axis(axis, a.rank(), "slice");
  if (begin > end || end > a.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for " + shape_str(a.shape()));
  }
  const AxisSplit sp = split_at(a.shape(), ax);
  const std::size_t len = end - begin;
  Shape out_shape = a.shape();
  out_shape[ax] = len;
  std::vector<double> out(sp.outer * len * sp.inner);
  const auto& x = a.node()->data;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(x.begin() + static_cast<long>((o * sp.n + begin) * sp.inner),
                len * sp.inner, out.begin() + static_cast<long>(o * len * sp.inner));
  }
  return make_op("slice", std::move(out_shape), std::move(out), {a},
                 [sp, begin, len](Node& self) {
                   auto& gp = self.parents[0]->ensure_grad();
                   for (std::size_t o = 0; o < sp.outer; ++o) {
                     double* dst = gp.data() + (o * sp.n + begin) * sp.inner;
                     const double* src = self.grad.data() + o * len * sp.inner;
                     for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
                   }
                 });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = norm_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat", parts[0].shape(), s);
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != ax && s[d] != parts[0].shape()[d]) {
        throw ShapeError("concat", parts[0].shape(), s);
      }
    }
    out_shape[ax] += s[ax];
  }
  const AxisSplit sp = split_at(out_shape, ax);
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.shape()[ax]);
  std::vector<double> out(numel_of(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& x = parts[k].node()->data;
    const std::size_t w = widths[k];
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(x.begin() + static_cast<long>(o * w * sp.inner), w * sp.inner,
                  out.begin() + static_cast<long>((o * sp.n + offset) * sp.inner));
    }
    offset += w;
  }
  return make_op("concat", std::move(out_shape), std::move(out), parts,
                 [sp, widths](Node& self) {
                   std::size_t offset = 0;
                   for (std::size_t k = 0; k < widths.size(); ++k) {
                     Node& p = *self.parents[k];
                     const std::size_t w = widths[k];
                     if (p.requires_grad) {
                       auto& gp = p.ensure_grad();
                       for (std::size_t o = 0; o < sp.outer; ++o) {
                         const double* src =
                             self.grad.data() + (o * sp.n + offset) * sp.inner;
                         double* dst = gp.data() + o * w * sp.inner;
                         for (std::size_t i = 0; i < w * sp.inner; ++i) dst[i] += src[i];
                       }
                     }
                     offset += w;
                   }
                 });
}

Tensor index_select(const Tensor& a, int axis,
                    const std::vector<std::size_t>& indices) {
  const std::size_t ax = norm_axis(axis, a.rank(), "index_select");
  const AxisSplit sp = split_at(a.shape(), ax);
  for (auto i : indices) {
    if (i >= sp.n) {
      throw ShapeError("index_select: index " + std::to_string(i) +
                       " out of range for " + shape_str(a.shape()));
    }
  }
  const std::size_t m = indices.size();
  Shape out_shape = a.shape();
  out_shape[ax] = m;
  std::vector<double> out(sp.outer * m * sp.inner);
  const auto& x = a.node()->data;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < m; ++j) {
      std::copy_n(x.begin() + static_cast<long>((o * sp.n + indices[j]) * sp.inner),
                  sp.inner, out.begin() + static_cast<long>((o * m + j) * sp.inner));
    }
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(indices);
  return make_op("index_select", std::move(out_shape), std::move(out), {a},
                 [sp, idx](Node& self) {
                   auto& gp = self.parents[0]->ensure_grad();
                   const std::size_t m = idx->size();
                   for (std::size_t o = 0; o < sp.outer; ++o) {
                     for (std::size_t j = 0; j < m; ++j) {
                       double* dst = gp.data() + (o * sp.n + (*idx)[j]) * sp.inner;
                       const double* src = self.grad.data() + (o * m + j) * sp.inner;
                       for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
                     }
                   }
                 });
}

Tensor gather(const Tensor& a, const std::vector<std::size_t>& indices) {
  if (a.rank() < 1) throw ShapeError("gather: rank-0 input");
  const std::size_t c = a.shape().back();
  const std::size_t rows = a.numel() / c;
  if (indices.size() != rows) {
    throw ShapeError("gather: " + std::to_string(indices.size()) +
                     " indices for " + shape_str(a.shape()));
  }
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (indices[r] >= c) {
      throw ShapeError("gather: index " + std::to_string(indices[r]) +
                       " out of range for " + shape_str(a.shape()));
    }
    out[r] = a.node()->data[r * c + indices[r]];
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  auto idx = std::make_shared<std::vector<std::size_t>>(indices);
  return make_op("gather", std::move(out_shape), std::move(out), {a},
                 [idx, c](Node& self) {
                   auto& gp = self.parents[0]->ensure_grad();
                   for (std::size_t r = 0; r < idx->size(); ++r) {
                     gp[r * c + (*idx)[r]] += self.grad[r];
                   }
                 });
}

Tensor softmax(const Tensor& a, int axis) {
  const std::size_t ax = norm_axis(axis, a.rank(), "softmax");
  const AxisSplit sp = split_at(a.shape(), ax);
  const auto& x = a.node()->data;
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, x[base + j * sp.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < sp.n; ++j) {
        const double e = std::exp(x[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] /= z;
    }
  }
  return make_op("softmax", a.shape(), std::move(out), {a}, [sp](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        double s = 0.0;
        for (std::size_t j = 0; j < sp.n; ++j) {
          s += y[base + j * sp.inner] * g[base + j * sp.inner];
        }
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t t = base + j * sp.inner;
          gp[t] += y[t] * (g[t] - s);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& a, int axis) {
  const std::size_t ax = norm_axis(axis, a.rank(), "log_softmax");
  const AxisSplit sp = split_at(a.shape(), ax);
  const auto& x = a.node()->data;
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, x[base + j * sp.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < sp.n; ++j) z += std::exp(x[base + j * sp.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t j = 0; j < sp.n; ++j) {
        out[base + j * sp.inner] = x[base + j * sp.inner] - lz;
      }
    }
  }
  return make_op("log_softmax", a.shape(), std::move(out), {a}, [sp](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        double s = 0.0;
        for (std::size_t j = 0; j < sp.n; ++j) s += g[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t t = base + j * sp.inner;
          gp[t] += g[t] - std::exp(y[t]) * s;
        }
      }
    }
  });
}

Tensor gated_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       std::size_t heads, const AttentionGate& gate) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("gated_attention", q.shape(), k.shape());
  }
  const std::size_t B = q.shape()[0], N = q.shape()[1], D = q.shape()[2];
  if (heads == 0 || D % heads != 0) {
    throw ShapeError("gated_attention: width " + std::to_string(D) +
                     " not divisible by " + std::to_string(heads) + " heads");
  }
  if (gate.tokens != N || gate.allowed.size() != B) {
    throw ShapeError("gated_attention(gate)", q.shape(),
                     {gate.allowed.size(), gate.tokens, gate.tokens});
  }
  const std::size_t dk = D / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  // Compressed key lists per (batch, query), shared by all heads.
  auto keys = std::make_shared<std::vector<std::vector<std::uint32_t>>>(B * N);
  for (std::size_t b = 0; b < B; ++b) {
    if (gate.allowed[b].size() != N * N) {
      throw ShapeError("gated_attention: gate is not N x N");
    }
    for (std::size_t i = 0; i < N; ++i) {
      auto& list = (*keys)[b * N + i];
      const std::uint8_t* row = gate.allowed[b].data() + i * N;
      for (std::size_t j = 0; j < N; ++j) {
        if (row[j]) list.push_back(static_cast<std::uint32_t>(j));
      }
      if (list.empty()) {
        throw std::invalid_argument("gated_attention: query " + std::to_string(i) +
                                    " has no allowed key");
      }
    }
  }
  // Attention weights, stored per (batch, head, query) aligned to key lists.
  auto weights = std::make_shared<std::vector<std::vector<double>>>(B * heads * N);
  std::vector<double> out(B * N * D, 0.0);
  const auto& xq = q.node()->data;
  const auto& xk = k.node()->data;
  const auto& xv = v.node()->data;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < N; ++i) {
        const auto& list = (*keys)[b * N + i];
        auto& w = (*weights)[(b * heads + h) * N + i];
        w.resize(list.size());
        const double* qi = xq.data() + (b * N + i) * D + h * dk;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < list.size(); ++t) {
          const double* kj = xk.data() + (b * N + list[t]) * D + h * dk;
          w[t] = dot(qi, kj, dk) * scale;
          mx = std::max(mx, w[t]);
        }
        double z = 0.0;
        for (auto& s : w) {
          s = std::exp(s - mx);
          z += s;
        }
        double* oi = out.data() + (b * N + i) * D + h * dk;
        for (std::size_t t = 0; t < list.size(); ++t) {
          w[t] /= z;
          axpy(w[t], xv.data() + (b * N + list[t]) * D + h * dk, oi, dk);
        }
      }
    }
  }
  return make_op(
      "gated_attention", q.shape(), std::move(out), {q, k, v},
      [=](Node& self) {
        Node& nq = *self.parents[0];
        Node& nk = *self.parents[1];
        Node& nv = *self.parents[2];
        double* gq = nq.requires_grad ? nq.ensure_grad().data() : nullptr;
        double* gk = nk.requires_grad ? nk.ensure_grad().data() : nullptr;
        double* gv = nv.requires_grad ? nv.ensure_grad().data() : nullptr;
        std::vector<double> dp;
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < N; ++i) {
              const auto& list = (*keys)[b * N + i];
              const auto& w = (*weights)[(b * heads + h) * N + i];
              const double* go = self.grad.data() + (b * N + i) * D + h * dk;
              dp.resize(list.size());
              double s = 0.0;
              for (std::size_t t = 0; t < list.size(); ++t) {
                const std::size_t j = list[t];
                dp[t] = dot(go, nv.data.data() + (b * N + j) * D + h * dk, dk);
                s += w[t] * dp[t];
                if (gv) axpy(w[t], go, gv + (b * N + j) * D + h * dk, dk);
              }
              const double* qi = nq.data.data() + (b * N + i) * D + h * dk;
              for (std::size_t t = 0; t < list.size(); ++t) {
                const std::size_t j = list[t];
                const double ds = w[t] * (dp[t] - s) * scale;
                if (ds == 0.0) continue;
                if (gq) axpy(ds, nk.data.data() + (b * N + j) * D + h * dk,
                             gq + (b * N + i) * D + h * dk, dk);
                if (gk) axpy(ds, qi, gk + (b * N + j) * D + h * dk, dk);
              }
            }
          }
        }
      });
}

}  // namespace comal::nd
