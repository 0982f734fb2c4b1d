#pragma once

// Central finite differences, the independent oracle for every analytic or
// autodiff gradient in the test suites.

#include <algorithm>
#include <cmath>
#include <functional>

#include "disco3d/core/tensor.hpp"

namespace disco3d::testing {

/// d f / d x[i] by central differences, perturbing `x` in place and restoring it.
inline double central_difference(Tensor& x, int64_t i, const std::function<double()>& f, double h = 1e-4) {
  const double saved = x[i];
  x[i] = saved + h;
  const double fp = f();
  x[i] = saved - h;
  const double fm = f();
  x[i] = saved;
  return (fp - fm) / (2.0 * h);
}

/// Relative error with an absolute floor so near-zero gradients are compared sensibly.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace disco3d::testing
