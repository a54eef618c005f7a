#pragma once

#include <functional>

#include "comal/ndgrad/tensor.hpp"

namespace comal::nd {

using ScalarFn = std::function<Tensor(const Tensor&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

/// Compares reverse-mode gradients of scalar `f` at `x` with central
/// differences of step `step`. Per coordinate the error is
/// |AD - CD| / (|CD| + 1e-8); the maximum is returned. Every primitive is
/// finite-checked during the sweep, so a NaN/Inf raises NonFiniteError
/// naming the offending operation.
GradCheckResult grad_check(const ScalarFn& f, const Tensor& x, double step = 1e-5);

/// Convenience wrapper returning only the maximum relative error.
double grad_check_error(const ScalarFn& f, const Tensor& x, double step = 1e-5);

}  // namespace comal::nd
