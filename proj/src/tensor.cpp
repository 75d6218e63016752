// SPDX-License-Identifier: Apache-2.0
#include "uprl/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <unordered_set>

namespace uprl {

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad{false};
  std::vector<double> grad;  // empty until first accumulation

  // graph record (empty for leaves)
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;
  bool backward_ran{false};

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

struct TensorAccess {
  static Tensor make(std::shared_ptr<TensorImpl> impl) {
    return Tensor(std::move(impl));
  }
  static const std::shared_ptr<TensorImpl>& ptr(const Tensor& t) {
    return t.impl_;
  }
};

}  // namespace detail

using detail::TensorAccess;
using detail::TensorImpl;

namespace {

thread_local bool t_grad_enabled = true;

std::size_t shape_numel(const Shape& s) {
  if (s.empty()) throw std::invalid_argument("tensor: empty shape");
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

void debug_check_finite(const std::vector<double>& v) {
#ifndef NDEBUG
  for (double x : v)
    assert(std::isfinite(x) && "non-finite value after forward op");
#else
  (void)v;
#endif
}

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

bool any_requires(const std::vector<Tensor>& parents) {
  for (const auto& p : parents)
    if (p.impl()->requires_grad) return true;
  return false;
}

// Creates a graph node. `backward_fn` accumulates into the parents' grads;
// it is recorded only when gradients are enabled and some parent wants them.
Tensor node(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
            std::function<void(TensorImpl&)> backward_fn) {
  debug_check_finite(data);
  auto impl = make_impl(std::move(shape), std::move(data));
  if (t_grad_enabled && any_requires(parents)) {
    impl->requires_grad = true;
    impl->parents.reserve(parents.size());
    for (const auto& p : parents) impl->parents.push_back(TensorAccess::ptr(p));
    impl->backward_fn = std::move(backward_fn);
  }
  return TensorAccess::make(std::move(impl));
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.shape().size() != 2)
    throw std::invalid_argument(std::string(op) + ": expected matrix, got " +
                                shape_str(a.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

// Raw row-major matrix products used by forward and backward kernels.
void mm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
  std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double aip = a[static_cast<std::size_t>(i) * k + p];
      const double* brow = b + static_cast<std::size_t>(p) * n;
      double* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
}

// c[m,k] += a[m,n] * b[k,n]^T
void mm_nt_acc(const double* a, const double* b, double* c, int m, int n,
               int k) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j) {
      const double* arow = a + static_cast<std::size_t>(i) * n;
      const double* brow = b + static_cast<std::size_t>(j) * n;
      double s = 0.0;
      for (int p = 0; p < n; ++p) s += arow[p] * brow[p];
      c[static_cast<std::size_t>(i) * k + j] += s;
    }
}

// c[k,n] += a[m,k]^T * b[m,n]
void mm_tn_acc(const double* a, const double* b, double* c, int m, int k,
               int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    const double* brow = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double aip = arow[p];
      if (aip == 0.0) continue;
      double* crow = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

using MapFn = double (*)(double);
using MapGradFn = double (*)(double x, double y);  // d out / d x given x, out y

Tensor elementwise(const Tensor& a, MapFn f, MapGradFn df) {
  std::vector<double> out(a.size());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  auto ap = TensorAccess::ptr(a);
  return node(a.shape(), std::move(out), {a}, [ap, df](TensorImpl& self) {
    auto& ga = ap->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i)
      ga[i] += self.grad[i] * df(ap->data[i], self.data[i]);
  });
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// ---- Tensor handle -------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, 0.0),
                   requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value),
                   requires_grad);
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw std::invalid_argument("tensor: shape " + shape_str(shape) +
                                " does not match data length " +
                                std::to_string(data.size()));
  Tensor t = TensorAccess::make(make_impl(std::move(shape), std::move(data)));
  t.impl()->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::gaussian(Shape shape, Rng& rng, double mean, double stddev,
                        bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (auto& x : data) x = rng.gaussian(mean, stddev);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::size() const { return impl_->data.size(); }
bool Tensor::is_scalar() const { return impl_->data.size() == 1; }

int Tensor::rows() const {
  if (impl_->shape.size() != 2)
    throw std::invalid_argument("tensor: rows() on non-matrix " +
                                shape_str(impl_->shape));
  return impl_->shape[0];
}
int Tensor::cols() const {
  if (impl_->shape.size() != 2)
    throw std::invalid_argument("tensor: cols() on non-matrix " +
                                shape_str(impl_->shape));
  return impl_->shape[1];
}

double Tensor::value() const {
  if (!is_scalar()) throw std::logic_error("tensor: value() on non-scalar");
  return impl_->data[0];
}
double Tensor::at(int i) const {
  return impl_->data.at(static_cast<std::size_t>(i));
}
double Tensor::at(int i, int j) const {
  return impl_->data.at(static_cast<std::size_t>(i) * cols() +
                        static_cast<std::size_t>(j));
}

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::raw_data() { return impl_->data; }

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool on) {
  if (on && impl_->backward_fn)
    throw std::logic_error("tensor: requires_grad is settable on leaves only");
  impl_->requires_grad = on;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const {
  if (impl_->grad.empty())
    throw std::logic_error("tensor: no gradient present");
  return impl_->grad;
}
std::span<double> Tensor::grad_mut() {
  if (impl_->grad.empty())
    throw std::logic_error("tensor: no gradient present");
  return impl_->grad;
}
void Tensor::zero_grad() { impl_->grad.clear(); }

void Tensor::accumulate_grad(std::span<const double> g) {
  if (g.size() != impl_->data.size())
    throw std::invalid_argument("tensor: gradient size mismatch");
  auto& buf = impl_->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

Tensor Tensor::clone_detached(bool requires_grad) const {
  return Tensor::from_data(impl_->shape, impl_->data, requires_grad);
}

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }
bool grad_enabled() { return t_grad_enabled; }

// ---- ops -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto ap = TensorAccess::ptr(a);
  auto bp = TensorAccess::ptr(b);
  return node({m, n}, std::move(out), {a, b},
              [ap, bp, m, k, n](TensorImpl& self) {
                if (ap->requires_grad)
                  mm_nt_acc(self.grad.data(), bp->data.data(),
                            ap->ensure_grad().data(), m, n, k);
                if (bp->requires_grad)
                  mm_tn_acc(ap->data.data(), self.grad.data(),
                            bp->ensure_grad().data(), m, k, n);
              });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const int m = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  const auto in = a.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(j) * m + i] =
          in[static_cast<std::size_t>(i) * n + j];
  auto ap = TensorAccess::ptr(a);
  return node({n, m}, std::move(out), {a}, [ap, m, n](TensorImpl& self) {
    auto& ga = ap->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        ga[static_cast<std::size_t>(i) * n + j] +=
            self.grad[static_cast<std::size_t>(j) * m + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto ap = TensorAccess::ptr(a);
  auto bp = TensorAccess::ptr(b);
  return node(a.shape(), std::move(out), {a, b}, [ap, bp](TensorImpl& self) {
    if (ap->requires_grad) {
      auto& ga = ap->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (bp->requires_grad) {
      auto& gb = bp->ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto ap = TensorAccess::ptr(a);
  auto bp = TensorAccess::ptr(b);
  return node(a.shape(), std::move(out), {a, b}, [ap, bp](TensorImpl& self) {
    if (ap->requires_grad) {
      auto& ga = ap->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (bp->requires_grad) {
      auto& gb = bp->ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
    }
  });
}

Tensor add_bias_row(const Tensor& a, const Tensor& b) {
  require_matrix(a, "add_bias_row");
  if (b.shape().size() != 1 || b.shape()[0] != a.cols())
    throw std::invalid_argument("add_bias_row: bias " + shape_str(b.shape()) +
                                " incompatible with " + shape_str(a.shape()));
  const int m = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(i) * n + j] =
          a.data()[static_cast<std::size_t>(i) * n + j] + b.data()[j];
  auto ap = TensorAccess::ptr(a);
  auto bp = TensorAccess::ptr(b);
  return node(a.shape(), std::move(out), {a, b}, [ap, bp, m, n](TensorImpl& self) {
    if (ap->requires_grad) {
      auto& ga = ap->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (bp->requires_grad) {
      auto& gb = bp->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          gb[j] += self.grad[static_cast<std::size_t>(i) * n + j];
    }
  });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto ap = TensorAccess::ptr(a);
  auto bp = TensorAccess::ptr(b);
  return node(a.shape(), std::move(out), {a, b}, [ap, bp](TensorImpl& self) {
    if (ap->requires_grad) {
      auto& ga = ap->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i)
        ga[i] += self.grad[i] * bp->data[i];
    }
    if (bp->requires_grad) {
      auto& gb = bp->ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i)
        gb[i] += self.grad[i] * ap->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.data()[i];
  auto ap = TensorAccess::ptr(a);
  return node(a.shape(), std::move(out), {a}, [ap, c](TensorImpl& self) {
    auto& ga = ap->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * self.grad[i];
  });
}

Tensor sigmoid(const Tensor& a) {
  return elementwise(
      a,
      [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& a) {
  return elementwise(
      a,
      [](double x) {
        return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
      },
      [](double x, double) {
        // d/dx log sigmoid(x) = sigmoid(-x)
        return x >= 0.0 ? std::exp(-x) / (1.0 + std::exp(-x))
                        : 1.0 / (1.0 + std::exp(x));
      });
}

Tensor tanh(const Tensor& a) {
  return elementwise(a, [](double x) { return std::tanh(x); },
                     [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
  return elementwise(a, [](double x) { return std::exp(x); },
                     [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double x : a.data())
    if (!(x > 0.0))
      throw std::domain_error("log: non-positive input " + std::to_string(x));
  return elementwise(a, [](double x) { return std::log(x); },
                     [](double x, double) { return 1.0 / x; });
}

Tensor relu(const Tensor& a) {
  return elementwise(a, [](double x) { return x > 0.0 ? x : 0.0; },
                     [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor square(const Tensor& a) {
  return elementwise(a, [](double x) { return x * x; },
                     [](double x, double) { return 2.0 * x; });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  auto ap = TensorAccess::ptr(a);
  return node({1}, {s}, {a}, [ap](TensorImpl& self) {
    auto& ga = ap->ensure_grad();
    for (double& g : ga) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  const double inv = 1.0 / static_cast<double>(a.size());
  auto ap = TensorAccess::ptr(a);
  return node({1}, {s * inv}, {a}, [ap, inv](TensorImpl& self) {
    auto& ga = ap->ensure_grad();
    for (double& g : ga) g += self.grad[0] * inv;
  });
}

Tensor add_n(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("add_n: empty input");
  for (const auto& p : parts) require_same_shape(parts[0], p, "add_n");
  std::vector<double> out(parts[0].size(), 0.0);
  for (const auto& p : parts)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += p.data()[i];
  std::vector<std::shared_ptr<TensorImpl>> impls;
  impls.reserve(parts.size());
  for (const auto& p : parts) impls.push_back(TensorAccess::ptr(p));
  return node(parts[0].shape(), std::move(out), parts,
              [impls](TensorImpl& self) {
                for (const auto& p : impls) {
                  if (!p->requires_grad) continue;
                  auto& gp = p->ensure_grad();
                  for (std::size_t i = 0; i < gp.size(); ++i)
                    gp[i] += self.grad[i];
                }
              });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::min(hi, std::max(lo, a.data()[i]));
  auto ap = TensorAccess::ptr(a);
  return node(a.shape(), std::move(out), {a}, [ap, lo, hi](TensorImpl& self) {
    auto& ga = ap->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (ap->data[i] >= lo && ap->data[i] <= hi) ga[i] += self.grad[i];
  });
}

Tensor min_elem(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "min_elem");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::min(a.data()[i], b.data()[i]);
  auto ap = TensorAccess::ptr(a);
  auto bp = TensorAccess::ptr(b);
  return node(a.shape(), std::move(out), {a, b}, [ap, bp](TensorImpl& self) {
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      const bool take_a = ap->data[i] <= bp->data[i];
      auto& p = take_a ? *ap : *bp;
      if (p.requires_grad) p.ensure_grad()[i] += self.grad[i];
    }
  });
}

namespace {

// Shared row-wise log-softmax kernel: y = x - logsumexp(x_row).
void log_softmax_kernel(const double* x, double* y, int rows, int n) {
  for (int i = 0; i < rows; ++i) {
    const double* xr = x + static_cast<std::size_t>(i) * n;
    double* yr = y + static_cast<std::size_t>(i) * n;
    double mx = xr[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    double se = 0.0;
    for (int j = 0; j < n; ++j) se += std::exp(xr[j] - mx);
    const double lse = std::log(se);
    for (int j = 0; j < n; ++j) yr[j] = (xr[j] - mx) - lse;
  }
}

Tensor log_softmax_impl(const Tensor& a, int rows, int n) {
  std::vector<double> out(a.size());
  log_softmax_kernel(a.data().data(), out.data(), rows, n);
  auto ap = TensorAccess::ptr(a);
  return node(a.shape(), std::move(out), {a}, [ap, rows, n](TensorImpl& self) {
    auto& ga = ap->ensure_grad();
    for (int i = 0; i < rows; ++i) {
      const double* g = self.grad.data() + static_cast<std::size_t>(i) * n;
      const double* y = self.data.data() + static_cast<std::size_t>(i) * n;
      double gs = 0.0;
      for (int j = 0; j < n; ++j) gs += g[j];
      double* gr = ga.data() + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) gr[j] += g[j] - std::exp(y[j]) * gs;
    }
  });
}

}  // namespace

Tensor softmax_rows(const Tensor& a) {
  require_matrix(a, "softmax_rows");
  const int rows = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  log_softmax_kernel(a.data().data(), out.data(), rows, n);
  for (auto& v : out) v = std::exp(v);
  auto ap = TensorAccess::ptr(a);
  return node(a.shape(), std::move(out), {a}, [ap, rows, n](TensorImpl& self) {
    auto& ga = ap->ensure_grad();
    for (int i = 0; i < rows; ++i) {
      const double* g = self.grad.data() + static_cast<std::size_t>(i) * n;
      const double* p = self.data.data() + static_cast<std::size_t>(i) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += g[j] * p[j];
      double* gr = ga.data() + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) gr[j] += p[j] * (g[j] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  require_matrix(a, "log_softmax_rows");
  return log_softmax_impl(a, a.rows(), a.cols());
}

Tensor softmax_logprobs(const Tensor& logits) {
  if (logits.shape().size() != 1)
    throw std::invalid_argument("softmax_logprobs: expected vector, got " +
                                shape_str(logits.shape()));
  return log_softmax_impl(logits, 1, logits.shape()[0]);
}

Tensor rmsnorm_rows(const Tensor& a, double eps) {
  require_matrix(a, "rmsnorm_rows");
  const int rows = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  std::vector<double> inv_rms(static_cast<std::size_t>(rows));
  for (int i = 0; i < rows; ++i) {
    const double* xr = a.data().data() + static_cast<std::size_t>(i) * n;
    double ms = 0.0;
    for (int j = 0; j < n; ++j) ms += xr[j] * xr[j];
    ms = ms / n + eps;
    const double s = 1.0 / std::sqrt(ms);
    inv_rms[static_cast<std::size_t>(i)] = s;
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(i) * n + j] = xr[j] * s;
  }
  auto ap = TensorAccess::ptr(a);
  return node(a.shape(), std::move(out), {a},
              [ap, rows, n, inv_rms](TensorImpl& self) {
                auto& ga = ap->ensure_grad();
                for (int i = 0; i < rows; ++i) {
                  const double s = inv_rms[static_cast<std::size_t>(i)];
                  const double* g =
                      self.grad.data() + static_cast<std::size_t>(i) * n;
                  const double* x =
                      ap->data.data() + static_cast<std::size_t>(i) * n;
                  double dot = 0.0;
                  for (int j = 0; j < n; ++j) dot += g[j] * x[j];
                  const double c = s * s * s * dot / n;
                  double* gr = ga.data() + static_cast<std::size_t>(i) * n;
                  for (int j = 0; j < n; ++j) gr[j] += s * g[j] - c * x[j];
                }
              });
}

Tensor causal_mask(const Tensor& a) {
  require_matrix(a, "causal_mask");
  if (a.rows() != a.cols())
    throw std::invalid_argument("causal_mask: expected square matrix, got " +
                                shape_str(a.shape()));
  const int n = a.rows();
  std::vector<double> out(a.data().begin(), a.data().end());
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      out[static_cast<std::size_t>(i) * n + j] = -1e30;
  auto ap = TensorAccess::ptr(a);
  // additive constant mask: gradient passes through unchanged
  return node(a.shape(), std::move(out), {a}, [ap](TensorImpl& self) {
    auto& ga = ap->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor slice_rows(const Tensor& a, int row0, int count) {
  require_matrix(a, "slice_rows");
  if (row0 < 0 || count <= 0 || row0 + count > a.rows())
    throw std::invalid_argument("slice_rows: range [" + std::to_string(row0) +
                                "," + std::to_string(row0 + count) +
                                ") out of " + shape_str(a.shape()));
  const int n = a.cols();
  std::vector<double> out(static_cast<std::size_t>(count) * n);
  std::copy_n(a.data().data() + static_cast<std::size_t>(row0) * n, out.size(),
              out.data());
  auto ap = TensorAccess::ptr(a);
  return node({count, n}, std::move(out), {a},
              [ap, row0, n](TensorImpl& self) {
                auto& ga = ap->ensure_grad();
                for (std::size_t i = 0; i < self.data.size(); ++i)
                  ga[static_cast<std::size_t>(row0) * n + i] += self.grad[i];
              });
}

Tensor slice_cols(const Tensor& a, int col0, int count) {
  require_matrix(a, "slice_cols");
  if (col0 < 0 || count <= 0 || col0 + count > a.cols())
    throw std::invalid_argument("slice_cols: range out of " +
                                shape_str(a.shape()));
  const int m = a.rows(), n = a.cols();
  std::vector<double> out(static_cast<std::size_t>(m) * count);
  for (int i = 0; i < m; ++i)
    std::copy_n(a.data().data() + static_cast<std::size_t>(i) * n + col0, count,
                out.data() + static_cast<std::size_t>(i) * count);
  auto ap = TensorAccess::ptr(a);
  return node({m, count}, std::move(out), {a},
              [ap, col0, m, n, count](TensorImpl& self) {
                auto& ga = ap->ensure_grad();
                for (int i = 0; i < m; ++i)
                  for (int j = 0; j < count; ++j)
                    ga[static_cast<std::size_t>(i) * n + col0 + j] +=
                        self.grad[static_cast<std::size_t>(i) * count + j];
              });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const int m = parts[0].rows();
  int n = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != m)
      throw std::invalid_argument("concat_cols: row mismatch " +
                                  shape_str(p.shape()));
    n += p.cols();
  }
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  int off = 0;
  for (const auto& p : parts) {
    const int pc = p.cols();
    for (int i = 0; i < m; ++i)
      std::copy_n(p.data().data() + static_cast<std::size_t>(i) * pc, pc,
                  out.data() + static_cast<std::size_t>(i) * n + off);
    off += pc;
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  std::vector<int> widths;
  for (const auto& p : parts) {
    impls.push_back(TensorAccess::ptr(p));
    widths.push_back(p.cols());
  }
  return node({m, n}, std::move(out), parts,
              [impls, widths, m, n](TensorImpl& self) {
                int off = 0;
                for (std::size_t k = 0; k < impls.size(); ++k) {
                  const int pc = widths[k];
                  if (impls[k]->requires_grad) {
                    auto& gp = impls[k]->ensure_grad();
                    for (int i = 0; i < m; ++i)
                      for (int j = 0; j < pc; ++j)
                        gp[static_cast<std::size_t>(i) * pc + j] +=
                            self.grad[static_cast<std::size_t>(i) * n + off + j];
                  }
                  off += pc;
                }
              });
}

Tensor embedding_rows(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "embedding_rows");
  const int v = table.rows(), d = table.cols();
  if (ids.empty()) throw std::invalid_argument("embedding_rows: empty ids");
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::logic_error("embedding_rows: token id " + std::to_string(id) +
                             " out of range [0," + std::to_string(v) + ")");
  const int L = static_cast<int>(ids.size());
  std::vector<double> out(static_cast<std::size_t>(L) * d);
  for (int i = 0; i < L; ++i)
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d,
                out.data() + static_cast<std::size_t>(i) * d);
  std::vector<int> ids_copy(ids.begin(), ids.end());
  auto tp = TensorAccess::ptr(table);
  return node({L, d}, std::move(out), {table},
              [tp, ids_copy, d](TensorImpl& self) {
                auto& gt = tp->ensure_grad();
                for (std::size_t i = 0; i < ids_copy.size(); ++i)
                  for (int j = 0; j < d; ++j)
                    gt[static_cast<std::size_t>(ids_copy[i]) * d + j] +=
                        self.grad[i * d + j];
              });
}

Tensor gather_coords(const Tensor& a, std::span<const int> cols) {
  require_matrix(a, "gather_coords");
  if (static_cast<int>(cols.size()) != a.rows())
    throw std::invalid_argument("gather_coords: need one column per row");
  const int n = a.cols();
  std::vector<double> out(cols.size());
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] < 0 || cols[i] >= n)
      throw std::logic_error("gather_coords: column index out of range");
    out[i] = a.data()[i * n + static_cast<std::size_t>(cols[i])];
  }
  std::vector<int> cols_copy(cols.begin(), cols.end());
  auto ap = TensorAccess::ptr(a);
  return node({static_cast<int>(cols.size())}, std::move(out), {a},
              [ap, cols_copy, n](TensorImpl& self) {
                auto& ga = ap->ensure_grad();
                for (std::size_t i = 0; i < cols_copy.size(); ++i)
                  ga[i * n + static_cast<std::size_t>(cols_copy[i])] +=
                      self.grad[i];
              });
}

// ---- backward ----------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.valid()) throw std::logic_error("backward: null tensor");
  if (!loss.is_scalar())
    throw std::logic_error("backward: loss must be scalar, got " +
                           shape_str(loss.shape()));
  TensorImpl* root = loss.impl();
  if (!root->requires_grad)
    throw std::logic_error("backward: loss does not depend on any parameter");

  // Iterative post-order DFS: children (parents in graph terms) first.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (next < impl->parents.size()) {
      TensorImpl* p = impl->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(impl);
      stack.pop_back();
    }
  }

  for (TensorImpl* impl : order)
    if (impl->backward_fn && impl->backward_ran)
      throw std::logic_error(
          "backward: graph already consumed; rebuild the forward pass");

  root->ensure_grad()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = *it;
    if (!impl->backward_fn) continue;
    impl->ensure_grad();
    impl->backward_fn(*impl);
    impl->backward_ran = true;
  }
}

// ---- Adam ----------------------------------------------------------------

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    if (!p.valid() || !p.requires_grad())
      throw std::logic_error("adam: all parameters must require gradients");
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step() {
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (!params_[k].has_grad())
      throw std::logic_error("adam: parameter " + std::to_string(k) +
                             " has no gradient");
    auto g = params_[k].grad();
    auto w = params_[k].raw_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace uprl
