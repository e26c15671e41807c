#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "spct/tensor.hpp"

namespace testutil {

inline double rel_err(double a, double b, double floor_mag = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor_mag});
}

/// Central finite differences of a scalar function of a flat vector.
inline std::vector<double> central_diff(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& base, double h = 1e-6) {
  std::vector<double> g(base.size());
  std::vector<double> x = base;
  for (std::size_t i = 0; i < base.size(); ++i) {
    x[i] = base[i] + h;
    const double up = f(x);
    x[i] = base[i] - h;
    const double dn = f(x);
    x[i] = base[i];
    g[i] = (up - dn) / (2.0 * h);
  }
  return g;
}

/// Max relative error between a tape gradient and central differences.
inline double max_grad_err(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& base, const std::vector<double>& tape_grad,
    double h = 1e-6, double floor_mag = 1e-3) {
  const auto fd = central_diff(f, base, h);
  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i)
    worst = std::max(worst, rel_err(tape_grad[i], fd[i], floor_mag));
  return worst;
}

}  // namespace testutil
