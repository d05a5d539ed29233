#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hedl/errors.hpp"

namespace hedl {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);

namespace detail {
struct TensorNode;
}

/// Dense float64 n-d array participating in a reverse-mode differentiation
/// graph. Row-major flat storage. Copies share the underlying node (ops never
/// mutate their inputs, so sharing is safe); detach() makes an independent
/// value copy outside any graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<double> data,
                            bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int ndim() const;
  int64_t dim(int i) const;
  int64_t numel() const;

  double item() const;  // scalar tensors only
  double at(int64_t i) const;
  double at(int64_t row, int64_t col) const;

  std::span<const double> data() const;
  /// In-place value access for optimizer updates on leaves. Must not be
  /// called on graph-internal nodes between forward and backward.
  std::span<double> mutable_data();

  bool requires_grad() const;
  void set_requires_grad(bool v);
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;  // value copy, keeps requires_grad, fresh leaf

  // identity of the underlying node (used by the graph and by tests)
  const detail::TensorNode* node() const { return node_.get(); }

 private:
  friend struct detail::TensorNode;
  friend class GraphBuilder;
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend Tensor make_op(Shape shape, std::vector<double> value,
                        std::vector<Tensor> parents,
                        std::function<void(detail::TensorNode&)> backward);
};

/// Graph-node factory used by every op: materializes the value, wires parent
/// edges, and installs the gradient closure (dropped when no parent needs it).
Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
               std::function<void(detail::TensorNode&)> backward);

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first use
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;  // accumulates into parents

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  bool is_leaf() const { return parents.empty() && !backward_fn; }
  void ensure_grad();
  // guarded accumulation: skips parents that do not require grad
  static void accum(TensorNode& p, int64_t index, double v);
};
}  // namespace detail

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor square(const Tensor& a);
Tensor log(const Tensor& a);   // requires positive entries
Tensor exp(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form

// ---- linear algebra (2-d) ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matvec(const Tensor& a, const Tensor& x);   // [m,n]·[n] -> [m]
Tensor outer(const Tensor& u, const Tensor& v);    // [m],[n] -> [m,n]
Tensor dot(const Tensor& u, const Tensor& v);      // [n],[n] -> scalar
Tensor transpose(const Tensor& a);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor broadcast_row(const Tensor& v, int64_t rows);  // [n] -> [rows,n]
Tensor add_rowwise(const Tensor& a, const Tensor& v); // [m,n]+[n]

// ---- indexing ----
Tensor gather_rows(const Tensor& table, std::span<const int> indices);
Tensor gather_elems(const Tensor& a, std::span<const int> cols);  // per-row pick

// ---- reductions / normalization ----
Tensor sum(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean(const Tensor& a);
Tensor softmax(const Tensor& a, int axis);      // max-subtraction stabilized
Tensor log_softmax(const Tensor& a, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);  // normalizes the last axis per row

/// Reverse-mode sweep from a scalar loss. Visits every reachable node exactly
/// once in reverse topological order, accumulating into the grad of every
/// requires_grad leaf. The traversed graph is discarded afterwards (one
/// backward per forward).
void backward(const Tensor& loss);

/// Max over all parameter coordinates of
///   |analytic - central_difference| / max(1, |analytic|)
/// with central difference (f(p+eps·e) - f(p-eps·e)) / (2 eps).
/// f must rebuild its graph from the current parameter values on every call.
double grad_check(const std::function<Tensor(std::span<Tensor>)>& f,
                  std::span<Tensor> params, double eps);

}  // namespace hedl
