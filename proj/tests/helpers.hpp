#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "repdib/rng.hpp"
#include "repdib/tensor.hpp"

namespace repdib::testing {

// Central finite differences of a scalar function of a flat vector.
inline std::vector<double> fd_grad(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

inline double max_rel_err(const std::vector<double>& a,
                          const Tensor<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, rel_err(a[i], b.v[i]));
  return worst;
}

inline Tensor<double> random_tensor(int r, int c, Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
  Tensor<double> t(r, c);
  for (auto& x : t.v) x = rng.uniform(lo, hi);
  return t;
}

// Upper critical value of the chi-squared distribution via the
// Wilson-Hilferty approximation; good enough for the statistical tests here.
inline double chi2_critical(int dof, double z) {
  const double d = static_cast<double>(dof);
  const double t = 1.0 - 2.0 / (9.0 * d) + z * std::sqrt(2.0 / (9.0 * d));
  return d * t * t * t;
}

// z for p = 0.01 upper tail.
inline double chi2_critical_p01(int dof) { return chi2_critical(dof, 2.3263478740); }

}  // namespace repdib::testing
