// SPDX-License-Identifier: Apache-2.0
//
// Test-only oracles, independent of the implementation paths they check:
// central finite differences, a brute-force two-sided Jacobi eigensolver,
// and small statistics helpers.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace oracles {

// Central finite difference of f at x along coordinate i.
inline double fd_partial(const std::function<double(std::span<const double>)>& f,
                         std::vector<double> x, std::size_t i,
                         double h = 1e-6) {
  x[i] += h;
  const double fp = f(x);
  x[i] -= 2.0 * h;
  const double fm = f(x);
  return (fp - fm) / (2.0 * h);
}

// Max relative error between an analytic gradient and central differences.
// Denominator floored so near-zero gradients compare absolutely.
inline double max_fd_rel_error(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> x0, std::span<const double> analytic,
    double h = 1e-6, double denom_floor = 1e-3) {
  if (x0.size() != analytic.size())
    throw std::invalid_argument("max_fd_rel_error: size mismatch");
  std::vector<double> x(x0.begin(), x0.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double fd = fd_partial(f, x, i, h);
    const double denom =
        std::max({std::abs(fd), std::abs(analytic[i]), denom_floor});
    worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
  }
  return worst;
}

// Brute-force cyclic two-sided Jacobi eigensolver for symmetric matrices.
// Returns eigenvalues sorted descending. Deliberately naive.
inline std::vector<double> jacobi_eigenvalues(std::vector<double> a, int n,
                                              int sweeps = 100,
                                              double tol = 1e-14) {
  auto at = [&](int i, int j) -> double& {
    return a[static_cast<std::size_t>(i) * n + j];
  };
  for (int sweep = 0; sweep < sweeps; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
    if (std::sqrt(off) < tol) break;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        if (std::abs(at(p, q)) < 1e-300) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * at(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(1.0 + theta * theta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) ev[static_cast<std::size_t>(i)] = at(i, i);
  std::sort(ev.begin(), ev.end(), std::greater<double>());
  return ev;
}

inline double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace oracles
