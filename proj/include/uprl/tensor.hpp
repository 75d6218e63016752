// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode autodiff over dense f64 tensors. A dynamic tape is
// rebuilt on every forward pass: each op allocates a fresh node holding its
// parents and a backward closure; backward() walks the graph once in reverse
// topological order. Tensors are value handles onto shared storage and are
// treated as immutable once they participate in a graph.
//
// Error conventions used across the project:
//   shape mismatch        -> std::invalid_argument
//   contract violation    -> std::logic_error
//   domain violation      -> std::domain_error
//   numerical failure     -> std::runtime_error
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "uprl/rng.hpp"

namespace uprl {

using Shape = std::vector<int>;

namespace detail {
struct TensorImpl;
struct TensorAccess;
}

class Tensor {
 public:
  Tensor() = default;  // null handle

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor gaussian(Shape shape, Rng& rng, double mean, double stddev,
                         bool requires_grad = false);

  bool valid() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  bool is_scalar() const;  // size() == 1
  int rows() const;        // rank-2 only
  int cols() const;        // rank-2 only

  double value() const;               // scalar read
  double at(int i) const;             // rank-1
  double at(int i, int j) const;      // rank-2
  std::span<const double> data() const;

  // Direct storage access, for optimizers / checkpoint IO / tests. Must not
  // be used while a graph referencing this tensor is still live.
  std::span<double> raw_data();

  bool requires_grad() const;
  void set_requires_grad(bool on);  // leaves only

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();
  void accumulate_grad(std::span<const double> g);  // external gradient injection

  // Deep copy of the data, detached from any graph.
  Tensor clone_detached(bool requires_grad = false) const;

  detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
  friend struct detail::TensorAccess;
};

// While alive, ops do not record graph nodes (pure forward evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
bool grad_enabled();

// ---- ops -------------------------------------------------------------
// Broadcasting is restricted to the two documented cases: scalar*tensor
// (the `scale` op) and row-vector bias addition (`add_bias_row`).

Tensor matmul(const Tensor& a, const Tensor& b);        // [m,k]x[k,n]
Tensor transpose(const Tensor& a);                      // [m,n]->[n,m]
Tensor add(const Tensor& a, const Tensor& b);           // same shape
Tensor sub(const Tensor& a, const Tensor& b);           // same shape
Tensor add_bias_row(const Tensor& a, const Tensor& b);  // [m,n]+[n]
Tensor hadamard(const Tensor& a, const Tensor& b);      // same shape
Tensor scale(const Tensor& a, double c);
Tensor sigmoid(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);  // numerically stable log(sigmoid(x))
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // domain error on non-positive input
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sum(const Tensor& a);   // scalar
Tensor mean(const Tensor& a);  // scalar
Tensor add_n(const std::vector<Tensor>& parts);  // elementwise sum, same shapes
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor min_elem(const Tensor& a, const Tensor& b);  // elementwise min

// Row-wise softmax family over rank-2 inputs (each row a distribution).
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
// Rank-1 convenience: logsumexp-stabilized log-probabilities.
Tensor softmax_logprobs(const Tensor& logits);

// out[i,j] = a[i,j] / sqrt(mean_j(a[i,:]^2) + eps)
Tensor rmsnorm_rows(const Tensor& a, double eps = 1e-8);

// Adds -1e30 above the diagonal of a square score matrix.
Tensor causal_mask(const Tensor& a);

Tensor slice_rows(const Tensor& a, int row0, int count);
Tensor slice_cols(const Tensor& a, int col0, int count);
Tensor concat_cols(const std::vector<Tensor>& parts);

// Gathers rows `ids` of `table` ([V,d] -> [len(ids),d]); backward scatters.
Tensor embedding_rows(const Tensor& table, std::span<const int> ids);
// out[i] = a[i, cols[i]]
Tensor gather_coords(const Tensor& a, std::span<const int> cols);

// Runs reverse-mode accumulation from a scalar loss. Each graph may be
// walked once; a second call on the same graph is a contract error.
void backward(const Tensor& loss);

// ---- Adam ------------------------------------------------------------

struct AdamConfig {
  double lr{1e-3};
  double beta1{0.9};
  double beta2{0.999};
  double epsilon{1e-8};
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg = {});
  // Standard bias-corrected update. Throws std::logic_error when a
  // parameter has no gradient buffer.
  void step();
  void zero_grad();
  std::int64_t step_count() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamConfig cfg_;
  std::int64_t steps_{0};
};

std::string shape_str(const Shape& s);

}  // namespace uprl
