#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "repkan/rng.hpp"
#include "repkan/tensor.hpp"

namespace repkan::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Weighted sum, the scalar probe used by finite-difference checks.
inline double dot(const Tensor& a, const Tensor& b) {
  a.require_same_shape(b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Relative error, falling back to absolute error when both magnitudes are tiny.
inline double grad_error(double analytic, double numeric, double tiny = 1e-8) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < tiny) return std::abs(analytic - numeric);
  return std::abs(analytic - numeric) / scale;
}

struct GradCheckResult {
  double max_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
};

/// Central differences of `loss` w.r.t. entries of `param`, compared against `analytic`.
/// Checks every entry when `max_points` is 0, otherwise a random subset of that size.
inline GradCheckResult check_gradient(Tensor& param, const Tensor& analytic, const std::function<double()>& loss,
                                      Rng& rng, std::size_t max_points = 0, double eps = 1e-6) {
  GradCheckResult r;
  std::vector<std::size_t> idx(param.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (max_points > 0 && max_points < idx.size()) {
    rng.shuffle(idx);
    idx.resize(max_points);
  }
  for (std::size_t i : idx) {
    const double orig = param[i];
    param[i] = orig + eps;
    const double fp = loss();
    param[i] = orig - eps;
    const double fm = loss();
    param[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = grad_error(analytic[i], numeric);
    if (err >= r.max_error) {
      r.max_error = err;
      r.worst_index = i;
    }
    ++r.checked;
  }
  return r;
}

}  // namespace repkan::testing
