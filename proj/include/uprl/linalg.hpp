// SPDX-License-Identifier: Apache-2.0
//
// Dense SVD and the nuclear-norm/Frobenius diversity ratio. Works on plain
// row-major matrices, independent of the autodiff tape: the ratio gradient
// is returned in closed form and injected into parameter gradients by the
// caller.
#pragma once

#include <span>
#include <vector>

namespace uprl::linalg {

struct Mat {
  int rows{0};
  int cols{0};
  std::vector<double> v;  // row-major

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}
  Mat(int r, int c, std::vector<double> data);

  double& at(int i, int j) { return v[static_cast<std::size_t>(i) * cols + j]; }
  double at(int i, int j) const {
    return v[static_cast<std::size_t>(i) * cols + j];
  }
  static Mat identity(int n);
};

// Thin SVD, a = U * diag(s) * V^T with q = min(rows, cols) columns.
// Deterministic up to the fixed sign convention: the largest-magnitude entry
// of each U column is positive.
struct SvdResult {
  Mat u;                  // p x q, orthonormal columns
  std::vector<double> s;  // q, descending, non-negative
  Mat v;                  // d x q, orthonormal columns
};

// One-sided Jacobi. Convergence tolerance 1e-12 on normalized off-diagonal
// mass, 60-sweep cap; throws std::runtime_error with the residual when the
// cap is hit, std::domain_error on non-finite input.
SvdResult svd(const Mat& a);

double frobenius_norm(const Mat& a);
double nuclear_norm(const Mat& a);

struct NnmRatio {
  double value{0.0};
  Mat grad;  // d(value)/dA, same shape as the input
};

// value = ||A||_* / ||A||_F in [1, sqrt(min(p,d))];
// grad  = U V^T / ||A||_F  -  (||A||_* / ||A||_F^3) A.
// The subgradient U V^T is used as-is at repeated or zero singular values.
// Requires ||A||_F > 1e-10.
NnmRatio nnm_ratio_with_grad(const Mat& a);
double nnm_ratio(const Mat& a);

}  // namespace uprl::linalg
