#include "comal/ndgrad/grad_check.hpp"

#include <cmath>
#include <vector>

namespace comal::nd {

GradCheckResult grad_check(const ScalarFn& f, const Tensor& x, double step) {
  FiniteCheckGuard finite;
  Tensor probe = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()),
                              true);
  Tensor y = f(probe);
  if (y.numel() != 1) {
    throw AutogradError("grad_check: function is not scalar-valued, shape " +
                        shape_str(y.shape()));
  }
  std::vector<double> analytic(probe.numel(), 0.0);
  if (y.requires_grad()) {
    y.backward();
    if (probe.has_grad()) analytic.assign(probe.grad().begin(), probe.grad().end());
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  std::vector<double> base(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus = base, minus = base;
    plus[i] += step;
    minus[i] -= step;
    const double fp = f(Tensor::from(x.shape(), std::move(plus))).item();
    const double fm = f(Tensor::from(x.shape(), std::move(minus))).item();
    const double numeric = (fp - fm) / (2.0 * step);
    const double err = std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-8);
    if (err > result.max_rel_error || i == 0) {
      result.max_rel_error = std::max(result.max_rel_error, err);
      if (err >= result.max_rel_error) result.worst_index = i;
    }
  }
  return result;
}

double grad_check_error(const ScalarFn& f, const Tensor& x, double step) {
  return grad_check(f, x, step).max_rel_error;
}

}  // namespace comal::nd
