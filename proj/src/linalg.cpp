// SPDX-License-Identifier: Apache-2.0
#include "uprl/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace uprl::linalg {

namespace {

constexpr double kJacobiTol = 1e-12;
constexpr int kMaxSweeps = 60;
constexpr double kSigmaTiny = 1e-150;

void require_finite(const Mat& a, const char* op) {
  for (double x : a.v)
    if (!std::isfinite(x))
      throw std::domain_error(std::string(op) + ": non-finite input entry");
}

Mat transposed(const Mat& a) {
  Mat t(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

// Gram-Schmidt completion of a zero singular direction: first standard basis
// vector with a usable residual against the existing columns.
void complete_column(Mat& u, int col) {
  const int p = u.rows;
  for (int basis = 0; basis < p; ++basis) {
    std::vector<double> cand(static_cast<std::size_t>(p), 0.0);
    cand[static_cast<std::size_t>(basis)] = 1.0;
    for (int k = 0; k < col; ++k) {
      double dot = 0.0;
      for (int i = 0; i < p; ++i) dot += cand[static_cast<std::size_t>(i)] * u.at(i, k);
      for (int i = 0; i < p; ++i) cand[static_cast<std::size_t>(i)] -= dot * u.at(i, k);
    }
    double nrm = 0.0;
    for (double x : cand) nrm += x * x;
    nrm = std::sqrt(nrm);
    if (nrm > 0.5) {
      for (int i = 0; i < p; ++i) u.at(i, col) = cand[static_cast<std::size_t>(i)] / nrm;
      return;
    }
  }
  throw std::runtime_error("svd: orthonormal completion failed");
}

// Hestenes one-sided Jacobi for p >= d: orthogonalizes the columns of a
// working copy while accumulating the right rotations into V.
SvdResult svd_tall(const Mat& a) {
  const int p = a.rows, d = a.cols;
  Mat b = a;
  Mat v = Mat::identity(d);

  // Columns whose norm collapses below this scale are exact zeros for our
  // purposes; rotating rounding noise against itself never converges.
  double scale2 = 0.0;
  for (double x : a.v) scale2 += x * x;
  const double tiny2 = scale2 * 1e-28;

  double worst = 0.0;
  bool converged = false;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    for (int j = 0; j < d; ++j) {
      double nrm2 = 0.0;
      for (int r = 0; r < p; ++r) nrm2 += b.at(r, j) * b.at(r, j);
      if (nrm2 <= tiny2)
        for (int r = 0; r < p; ++r) b.at(r, j) = 0.0;
    }
    worst = 0.0;
    for (int i = 0; i < d - 1; ++i) {
      for (int j = i + 1; j < d; ++j) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (int r = 0; r < p; ++r) {
          const double bi = b.at(r, i), bj = b.at(r, j);
          alpha += bi * bi;
          beta += bj * bj;
          gamma += bi * bj;
        }
        if (alpha <= tiny2 || beta <= tiny2) continue;
        const double denom = std::sqrt(alpha * beta);
        worst = std::max(worst, std::abs(gamma) / denom);
        if (std::abs(gamma) <= kJacobiTol * denom) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (int r = 0; r < p; ++r) {
          const double bi = b.at(r, i), bj = b.at(r, j);
          b.at(r, i) = c * bi - s * bj;
          b.at(r, j) = s * bi + c * bj;
        }
        for (int r = 0; r < d; ++r) {
          const double vi = v.at(r, i), vj = v.at(r, j);
          v.at(r, i) = c * vi - s * vj;
          v.at(r, j) = s * vi + c * vj;
        }
      }
    }
    converged = worst <= kJacobiTol;
  }
  if (!converged)
    throw std::runtime_error("svd: no convergence after " +
                             std::to_string(kMaxSweeps) +
                             " sweeps, residual " + std::to_string(worst));

  std::vector<double> sigma(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) {
    double nrm = 0.0;
    for (int r = 0; r < p; ++r) nrm += b.at(r, j) * b.at(r, j);
    sigma[static_cast<std::size_t>(j)] = std::sqrt(nrm);
  }

  std::vector<int> perm(static_cast<std::size_t>(d));
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](int x, int y) {
    return sigma[static_cast<std::size_t>(x)] > sigma[static_cast<std::size_t>(y)];
  });

  SvdResult out;
  out.u = Mat(p, d);
  out.v = Mat(d, d);
  out.s.resize(static_cast<std::size_t>(d));
  for (int k = 0; k < d; ++k) {
    const int src = perm[static_cast<std::size_t>(k)];
    const double sk = sigma[static_cast<std::size_t>(src)];
    out.s[static_cast<std::size_t>(k)] = sk;
    for (int r = 0; r < d; ++r) out.v.at(r, k) = v.at(r, src);
    if (sk > kSigmaTiny) {
      for (int r = 0; r < p; ++r) out.u.at(r, k) = b.at(r, src) / sk;
    } else {
      complete_column(out.u, k);
    }
  }

  // sign convention: largest-magnitude entry of each U column positive
  for (int k = 0; k < d; ++k) {
    int arg = 0;
    double best = std::abs(out.u.at(0, k));
    for (int r = 1; r < p; ++r) {
      const double m = std::abs(out.u.at(r, k));
      if (m > best) {
        best = m;
        arg = r;
      }
    }
    if (out.u.at(arg, k) < 0.0) {
      for (int r = 0; r < p; ++r) out.u.at(r, k) = -out.u.at(r, k);
      for (int r = 0; r < d; ++r) out.v.at(r, k) = -out.v.at(r, k);
    }
  }
  return out;
}

}  // namespace

Mat::Mat(int r, int c, std::vector<double> data) : rows(r), cols(c), v(std::move(data)) {
  if (v.size() != static_cast<std::size_t>(r) * static_cast<std::size_t>(c))
    throw std::invalid_argument("mat: data length does not match dimensions");
}

Mat Mat::identity(int n) {
  Mat m(n, n);
  for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

SvdResult svd(const Mat& a) {
  if (a.rows < 1 || a.cols < 1)
    throw std::domain_error("svd: empty matrix");
  require_finite(a, "svd");
  if (a.rows >= a.cols) return svd_tall(a);
  SvdResult t = svd_tall(transposed(a));
  return SvdResult{std::move(t.v), std::move(t.s), std::move(t.u)};
}

double frobenius_norm(const Mat& a) {
  double s = 0.0;
  for (double x : a.v) s += x * x;
  return std::sqrt(s);
}

double nuclear_norm(const Mat& a) {
  const SvdResult r = svd(a);
  double s = 0.0;
  for (double x : r.s) s += x;
  return s;
}

NnmRatio nnm_ratio_with_grad(const Mat& a) {
  require_finite(a, "nnm_ratio");
  const double f = frobenius_norm(a);
  if (f <= 1e-10)
    throw std::domain_error("nnm_ratio: matrix is numerically zero");
  const SvdResult r = svd(a);
  double nuc = 0.0;
  for (double x : r.s) nuc += x;

  NnmRatio out;
  out.value = nuc / f;
  out.grad = Mat(a.rows, a.cols);
  const int q = static_cast<int>(r.s.size());
  const double c = nuc / (f * f * f);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) {
      double uv = 0.0;
      for (int k = 0; k < q; ++k) uv += r.u.at(i, k) * r.v.at(j, k);
      out.grad.at(i, j) = uv / f - c * a.at(i, j);
    }
  return out;
}

double nnm_ratio(const Mat& a) {
  const double f = frobenius_norm(a);
  if (f <= 1e-10)
    throw std::domain_error("nnm_ratio: matrix is numerically zero");
  return nuclear_norm(a) / f;
}

}  // namespace uprl::linalg
