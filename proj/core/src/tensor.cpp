#include "hedl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace hedl {

namespace {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

void check_shape_positive(const Shape& s) {
  for (int64_t d : s) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(s));
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

void require_2d(const char* op, const Tensor& a) {
  if (a.ndim() != 2) {
    throw ShapeError(std::string(op) + ": expected 2-d tensor, got " + shape_str(a.shape()));
  }
}

// (outer, n, inner) decomposition of `shape` around `axis`
struct AxisView {
  int64_t outer, n, inner;
};

AxisView axis_view(const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisView v{1, shape[axis], 1};
  for (int i = 0; i < axis; ++i) v.outer *= shape[i];
  for (size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

namespace detail {

void TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
}

void TensorNode::accum(TensorNode& p, int64_t index, double v) {
  if (!p.requires_grad) return;
  p.ensure_grad();
  p.grad[static_cast<size_t>(index)] += v;
}

}  // namespace detail

using detail::TensorNode;

Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  n->requires_grad = needs;
  if (needs) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node_);
    n->backward_fn = std::move(backward);
  }
  return Tensor(std::move(n));
}

// ---- factories and accessors ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape_positive(shape);
  auto n = std::make_shared<TensorNode>();
  n->value.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  if (requires_grad) n->ensure_grad();
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.node_->value.begin(), t.node_->value.end(), value);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full({1}, value, requires_grad);
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape_positive(shape);
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("from_vector: " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  if (requires_grad) n->ensure_grad();
  return Tensor(std::move(n));
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.node_->value) v = dist(rng);
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::ndim() const { return static_cast<int>(node_->shape.size()); }
int64_t Tensor::dim(int i) const { return node_->shape.at(i); }
int64_t Tensor::numel() const { return node_->numel(); }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item(): tensor is not scalar, shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(int64_t i) const { return node_->value.at(static_cast<size_t>(i)); }

double Tensor::at(int64_t row, int64_t col) const {
  require_2d("at", *this);
  return node_->value.at(static_cast<size_t>(row * dim(1) + col));
}

std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool v) {
  node_->requires_grad = v;
  if (v) node_->ensure_grad();
}

std::span<const double> Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}
std::span<double> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}
void Tensor::zero_grad() {
  node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::detach() const {
  return from_vector(node_->shape, node_->value, false);
}

Tensor Tensor::clone() const {
  return from_vector(node_->shape, node_->value, node_->requires_grad);
}

// ---- elementwise ----

namespace {

Tensor unary_op(const Tensor& a, std::vector<double> out,
                std::function<void(TensorNode&)> bw) {
  return make_op(a.shape(), std::move(out), {a}, std::move(bw));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    for (size_t i = 0; i < n.grad.size(); ++i) {
      TensorNode::accum(*n.parents[0], i, n.grad[i]);
      TensorNode::accum(*n.parents[1], i, n.grad[i]);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    for (size_t i = 0; i < n.grad.size(); ++i) {
      TensorNode::accum(*n.parents[0], i, n.grad[i]);
      TensorNode::accum(*n.parents[1], i, -n.grad[i]);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    for (size_t i = 0; i < n.grad.size(); ++i) {
      TensorNode::accum(pa, i, n.grad[i] * pb.value[i]);
      TensorNode::accum(pb, i, n.grad[i] * pa.value[i]);
    }
  });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = c * ad[i];
  return unary_op(a, std::move(out), [c](TensorNode& n) {
    for (size_t i = 0; i < n.grad.size(); ++i) TensorNode::accum(*n.parents[0], i, c * n.grad[i]);
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += c;
  return unary_op(a, std::move(out), [](TensorNode& n) {
    for (size_t i = 0; i < n.grad.size(); ++i) TensorNode::accum(*n.parents[0], i, n.grad[i]);
  });
}

Tensor square(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * ad[i];
  return unary_op(a, std::move(out), [](TensorNode& n) {
    auto& p = *n.parents[0];
    for (size_t i = 0; i < n.grad.size(); ++i) TensorNode::accum(p, i, 2.0 * p.value[i] * n.grad[i]);
  });
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) {
    if (ad[i] <= 0.0) throw ContractError("log: non-positive input " + std::to_string(ad[i]));
    out[i] = std::log(ad[i]);
  }
  return unary_op(a, std::move(out), [](TensorNode& n) {
    auto& p = *n.parents[0];
    for (size_t i = 0; i < n.grad.size(); ++i) TensorNode::accum(p, i, n.grad[i] / p.value[i]);
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(ad[i]);
  return unary_op(a, std::move(out), [](TensorNode& n) {
    for (size_t i = 0; i < n.grad.size(); ++i)
      TensorNode::accum(*n.parents[0], i, n.grad[i] * n.value[i]);
  });
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * ad[i] * (1.0 + std::erf(ad[i] * kInvSqrt2));
  }
  return unary_op(a, std::move(out), [](TensorNode& n) {
    auto& p = *n.parents[0];
    for (size_t i = 0; i < n.grad.size(); ++i) {
      double x = p.value[i];
      double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      TensorNode::accum(p, i, n.grad[i] * (cdf + x * pdf));
    }
  });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  auto ad = a.data(), bd = b.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &bd[p * n];
      double* orow = &out[i * n];
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return make_op({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& nd) {
    auto& pa = *nd.parents[0];
    auto& pb = *nd.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      // dA = dC · B^T
      for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (int64_t j = 0; j < n; ++j) s += nd.grad[i * n + j] * pb.value[p * n + j];
          pa.grad[i * k + p] += s;
        }
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      // dB = A^T · dC
      for (int64_t p = 0; p < k; ++p)
        for (int64_t i = 0; i < m; ++i) {
          const double av = pa.value[i * k + p];
          if (av == 0.0) continue;
          for (int64_t j = 0; j < n; ++j) pb.grad[p * n + j] += av * nd.grad[i * n + j];
        }
    }
  });
}

Tensor matvec(const Tensor& a, const Tensor& x) {
  require_2d("matvec", a);
  if (x.ndim() != 1 || x.dim(0) != a.dim(1)) {
    throw ShapeError("matvec: " + shape_str(a.shape()) + " vs " + shape_str(x.shape()));
  }
  const int64_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<size_t>(m), 0.0);
  auto ad = a.data(), xd = x.data();
  for (int64_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) s += ad[i * n + j] * xd[j];
    out[i] = s;
  }
  return make_op({m}, std::move(out), {a, x}, [m, n](TensorNode& nd) {
    auto& pa = *nd.parents[0];
    auto& px = *nd.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) pa.grad[i * n + j] += nd.grad[i] * px.value[j];
    }
    if (px.requires_grad) {
      px.ensure_grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) px.grad[j] += pa.value[i * n + j] * nd.grad[i];
    }
  });
}

Tensor outer(const Tensor& u, const Tensor& v) {
  if (u.ndim() != 1 || v.ndim() != 1) {
    throw ShapeError("outer: expected vectors, got " + shape_str(u.shape()) + " and " +
                     shape_str(v.shape()));
  }
  const int64_t m = u.dim(0), n = v.dim(0);
  std::vector<double> out(static_cast<size_t>(m * n));
  auto ud = u.data(), vd = v.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[i * n + j] = ud[i] * vd[j];
  return make_op({m, n}, std::move(out), {u, v}, [m, n](TensorNode& nd) {
    auto& pu = *nd.parents[0];
    auto& pv = *nd.parents[1];
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) {
        TensorNode::accum(pu, i, nd.grad[i * n + j] * pv.value[j]);
        TensorNode::accum(pv, j, nd.grad[i * n + j] * pu.value[i]);
      }
  });
}

Tensor dot(const Tensor& u, const Tensor& v) {
  if (u.ndim() != 1 || v.ndim() != 1 || u.dim(0) != v.dim(0)) {
    throw ShapeError("dot: " + shape_str(u.shape()) + " vs " + shape_str(v.shape()));
  }
  double s = 0.0;
  auto ud = u.data(), vd = v.data();
  for (size_t i = 0; i < ud.size(); ++i) s += ud[i] * vd[i];
  return make_op({1}, {s}, {u, v}, [](TensorNode& nd) {
    auto& pu = *nd.parents[0];
    auto& pv = *nd.parents[1];
    for (size_t i = 0; i < pu.value.size(); ++i) {
      TensorNode::accum(pu, i, nd.grad[0] * pv.value[i]);
      TensorNode::accum(pv, i, nd.grad[0] * pu.value[i]);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_2d("transpose", a);
  const int64_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n));
  auto ad = a.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
  return make_op({n, m}, std::move(out), {a}, [m, n](TensorNode& nd) {
    auto& p = *nd.parents[0];
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) TensorNode::accum(p, i * n + j, nd.grad[j * m + i]);
  });
}

// ---- shape ----

Tensor reshape(const Tensor& a, Shape shape) {
  check_shape_positive(shape);
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_op(std::move(shape), std::move(out), {a}, [](TensorNode& nd) {
    for (size_t i = 0; i < nd.grad.size(); ++i) TensorNode::accum(*nd.parents[0], i, nd.grad[i]);
  });
}

Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1) {
  require_2d("slice_cols", a);
  const int64_t m = a.dim(0), n = a.dim(1);
  if (c0 < 0 || c1 > n || c0 >= c1) {
    throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") invalid for " + shape_str(a.shape()));
  }
  const int64_t w = c1 - c0;
  std::vector<double> out(static_cast<size_t>(m * w));
  auto ad = a.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < w; ++j) out[i * w + j] = ad[i * n + c0 + j];
  return make_op({m, w}, std::move(out), {a}, [m, n, c0, w](TensorNode& nd) {
    auto& p = *nd.parents[0];
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < w; ++j) TensorNode::accum(p, i * n + c0 + j, nd.grad[i * w + j]);
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols: empty part list");
  const int64_t m = parts[0].dim(0);
  int64_t total = 0;
  for (const auto& p : parts) {
    require_2d("concat_cols", p);
    if (p.dim(0) != m) throw ShapeError("concat_cols: row counts disagree");
    total += p.dim(1);
  }
  std::vector<double> out(static_cast<size_t>(m * total));
  std::vector<int64_t> widths;
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t w = p.dim(1);
    auto pd = p.data();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < w; ++j) out[i * total + off + j] = pd[i * w + j];
    widths.push_back(w);
    off += w;
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return make_op({m, total}, std::move(out), std::move(parents),
                 [m, total, widths](TensorNode& nd) {
                   int64_t off2 = 0;
                   for (size_t pi = 0; pi < widths.size(); ++pi) {
                     auto& p = *nd.parents[pi];
                     const int64_t w = widths[pi];
                     for (int64_t i = 0; i < m; ++i)
                       for (int64_t j = 0; j < w; ++j)
                         TensorNode::accum(p, i * w + j, nd.grad[i * total + off2 + j]);
                     off2 += w;
                   }
                 });
}

Tensor broadcast_row(const Tensor& v, int64_t rows) {
  if (v.ndim() != 1) throw ShapeError("broadcast_row: expected vector, got " + shape_str(v.shape()));
  if (rows <= 0) throw ShapeError("broadcast_row: rows must be positive");
  const int64_t n = v.dim(0);
  std::vector<double> out(static_cast<size_t>(rows * n));
  auto vd = v.data();
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < n; ++j) out[i * n + j] = vd[j];
  return make_op({rows, n}, std::move(out), {v}, [rows, n](TensorNode& nd) {
    auto& p = *nd.parents[0];
    for (int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (int64_t i = 0; i < rows; ++i) s += nd.grad[i * n + j];
      TensorNode::accum(p, j, s);
    }
  });
}

Tensor add_rowwise(const Tensor& a, const Tensor& v) {
  require_2d("add_rowwise", a);
  if (v.ndim() != 1 || v.dim(0) != a.dim(1)) {
    throw ShapeError("add_rowwise: " + shape_str(a.shape()) + " vs " + shape_str(v.shape()));
  }
  const int64_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.data().begin(), a.data().end());
  auto vd = v.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[i * n + j] += vd[j];
  return make_op({m, n}, std::move(out), {a, v}, [m, n](TensorNode& nd) {
    auto& pa = *nd.parents[0];
    auto& pv = *nd.parents[1];
    for (size_t i = 0; i < nd.grad.size(); ++i) TensorNode::accum(pa, i, nd.grad[i]);
    if (pv.requires_grad) {
      pv.ensure_grad();
      for (int64_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (int64_t i = 0; i < m; ++i) s += nd.grad[i * n + j];
        pv.grad[j] += s;
      }
    }
  });
}

// ---- indexing ----

Tensor gather_rows(const Tensor& table, std::span<const int> indices) {
  require_2d("gather_rows", table);
  const int64_t v = table.dim(0), d = table.dim(1);
  const int64_t m = static_cast<int64_t>(indices.size());
  if (m == 0) throw ContractError("gather_rows: empty index list");
  std::vector<double> out(static_cast<size_t>(m * d));
  auto td = table.data();
  for (int64_t i = 0; i < m; ++i) {
    const int idx = indices[i];
    if (idx < 0 || idx >= v) {
      throw ContractError("gather_rows: index " + std::to_string(idx) + " out of range [0," +
                          std::to_string(v) + ")");
    }
    std::copy_n(&td[static_cast<int64_t>(idx) * d], d, &out[i * d]);
  }
  std::vector<int> idx_copy(indices.begin(), indices.end());
  return make_op({m, d}, std::move(out), {table}, [d, idx_copy](TensorNode& nd) {
    auto& p = *nd.parents[0];
    for (size_t i = 0; i < idx_copy.size(); ++i)
      for (int64_t j = 0; j < d; ++j)
        TensorNode::accum(p, static_cast<int64_t>(idx_copy[i]) * d + j, nd.grad[i * d + j]);
  });
}

Tensor gather_elems(const Tensor& a, std::span<const int> cols) {
  require_2d("gather_elems", a);
  const int64_t m = a.dim(0), n = a.dim(1);
  if (static_cast<int64_t>(cols.size()) != m) {
    throw ShapeError("gather_elems: need one column index per row");
  }
  std::vector<double> out(static_cast<size_t>(m));
  auto ad = a.data();
  for (int64_t i = 0; i < m; ++i) {
    const int c = cols[i];
    if (c < 0 || c >= n) {
      throw ContractError("gather_elems: column " + std::to_string(c) + " out of range [0," +
                          std::to_string(n) + ")");
    }
    out[i] = ad[i * n + c];
  }
  std::vector<int> cols_copy(cols.begin(), cols.end());
  return make_op({m}, std::move(out), {a}, [n, cols_copy](TensorNode& nd) {
    auto& p = *nd.parents[0];
    for (size_t i = 0; i < cols_copy.size(); ++i)
      TensorNode::accum(p, static_cast<int64_t>(i) * n + cols_copy[i], nd.grad[i]);
  });
}

// ---- reductions / normalization ----

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op({1}, {s}, {a}, [](TensorNode& nd) {
    auto& p = *nd.parents[0];
    for (size_t i = 0; i < p.value.size(); ++i) TensorNode::accum(p, i, nd.grad[0]);
  });
}

Tensor sum_axis(const Tensor& a, int axis) {
  const AxisView v = axis_view(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + axis);
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(static_cast<size_t>(v.outer * v.inner), 0.0);
  auto ad = a.data();
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t i = 0; i < v.n; ++i)
      for (int64_t k = 0; k < v.inner; ++k)
        out[o * v.inner + k] += ad[(o * v.n + i) * v.inner + k];
  return make_op(std::move(out_shape), std::move(out), {a}, [v](TensorNode& nd) {
    auto& p = *nd.parents[0];
    for (int64_t o = 0; o < v.outer; ++o)
      for (int64_t i = 0; i < v.n; ++i)
        for (int64_t k = 0; k < v.inner; ++k)
          TensorNode::accum(p, (o * v.n + i) * v.inner + k, nd.grad[o * v.inner + k]);
  });
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  return scale(sum(a), inv);
}

Tensor softmax(const Tensor& a, int axis) {
  const AxisView v = axis_view(a.shape(), axis);
  std::vector<double> out(static_cast<size_t>(a.numel()));
  auto ad = a.data();
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t k = 0; k < v.inner; ++k) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t i = 0; i < v.n; ++i) mx = std::max(mx, ad[(o * v.n + i) * v.inner + k]);
      double denom = 0.0;
      for (int64_t i = 0; i < v.n; ++i) {
        const size_t idx = static_cast<size_t>((o * v.n + i) * v.inner + k);
        out[idx] = std::exp(ad[idx] - mx);
        denom += out[idx];
      }
      for (int64_t i = 0; i < v.n; ++i) out[(o * v.n + i) * v.inner + k] /= denom;
    }
  }
  return make_op(a.shape(), std::move(out), {a}, [v](TensorNode& nd) {
    auto& p = *nd.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t o = 0; o < v.outer; ++o) {
      for (int64_t k = 0; k < v.inner; ++k) {
        double sdy = 0.0;
        for (int64_t i = 0; i < v.n; ++i) {
          const size_t idx = static_cast<size_t>((o * v.n + i) * v.inner + k);
          sdy += nd.grad[idx] * nd.value[idx];
        }
        for (int64_t i = 0; i < v.n; ++i) {
          const size_t idx = static_cast<size_t>((o * v.n + i) * v.inner + k);
          p.grad[idx] += nd.value[idx] * (nd.grad[idx] - sdy);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& a, int axis) {
  const AxisView v = axis_view(a.shape(), axis);
  std::vector<double> out(static_cast<size_t>(a.numel()));
  auto ad = a.data();
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t k = 0; k < v.inner; ++k) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t i = 0; i < v.n; ++i) mx = std::max(mx, ad[(o * v.n + i) * v.inner + k]);
      double denom = 0.0;
      for (int64_t i = 0; i < v.n; ++i) denom += std::exp(ad[(o * v.n + i) * v.inner + k] - mx);
      const double lse = mx + std::log(denom);
      for (int64_t i = 0; i < v.n; ++i) {
        const size_t idx = static_cast<size_t>((o * v.n + i) * v.inner + k);
        out[idx] = ad[idx] - lse;
      }
    }
  }
  return make_op(a.shape(), std::move(out), {a}, [v](TensorNode& nd) {
    auto& p = *nd.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t o = 0; o < v.outer; ++o) {
      for (int64_t k = 0; k < v.inner; ++k) {
        double sdy = 0.0;
        for (int64_t i = 0; i < v.n; ++i) sdy += nd.grad[(o * v.n + i) * v.inner + k];
        for (int64_t i = 0; i < v.n; ++i) {
          const size_t idx = static_cast<size_t>((o * v.n + i) * v.inner + k);
          p.grad[idx] += nd.grad[idx] - std::exp(nd.value[idx]) * sdy;
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.ndim() < 1) throw ShapeError("layer_norm: empty shape");
  const int64_t n = x.shape().back();
  if (gain.ndim() != 1 || gain.dim(0) != n || bias.ndim() != 1 || bias.dim(0) != n) {
    throw ShapeError("layer_norm: gain/bias must be [n] with n = last dim of x");
  }
  const int64_t rows = x.numel() / n;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  std::vector<double> xhat(static_cast<size_t>(x.numel()));
  std::vector<double> inv_std(static_cast<size_t>(rows));
  auto xd = x.data(), gd = gain.data(), bd = bias.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = &xd[r * n];
    double mu = 0.0;
    for (int64_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int64_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (row[j] - mu) * is;
      out[r * n + j] = gd[j] * xhat[r * n + j] + bd[j];
    }
  }
  return make_op(x.shape(), std::move(out), {x, gain, bias},
                 [rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode& nd) {
                   auto& px = *nd.parents[0];
                   auto& pg = *nd.parents[1];
                   auto& pb = *nd.parents[2];
                   for (int64_t r = 0; r < rows; ++r) {
                     // dxhat = dy * g; dx = inv_std*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                     double m1 = 0.0, m2 = 0.0;
                     for (int64_t j = 0; j < n; ++j) {
                       const double dxh = nd.grad[r * n + j] * pg.value[j];
                       m1 += dxh;
                       m2 += dxh * xhat[r * n + j];
                     }
                     m1 /= static_cast<double>(n);
                     m2 /= static_cast<double>(n);
                     for (int64_t j = 0; j < n; ++j) {
                       const size_t idx = static_cast<size_t>(r * n + j);
                       const double dxh = nd.grad[idx] * pg.value[j];
                       TensorNode::accum(px, idx, inv_std[r] * (dxh - m1 - xhat[idx] * m2));
                       TensorNode::accum(pg, j, nd.grad[idx] * xhat[idx]);
                       TensorNode::accum(pb, j, nd.grad[idx]);
                     }
                   }
                 });
}

// ---- backward ----

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  TensorNode* root = const_cast<TensorNode*>(loss.node());
  if (!root->requires_grad) return;  // nothing reachable requires grad

  // iterative post-order DFS -> topological order (parents before node)
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next].get();
      ++next;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  for (TensorNode* n : topo) n->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
  // the graph is single-use: release edges and intermediate grads
  for (TensorNode* n : topo) {
    if (!n->is_leaf()) {
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

double grad_check(const std::function<Tensor(std::span<Tensor>)>& f,
                  std::span<Tensor> params, double eps) {
  if (eps <= 0.0) throw ContractError("grad_check: eps must be positive");
  for (auto& p : params) {
    if (!p.requires_grad()) throw ContractError("grad_check: all params must require grad");
    p.zero_grad();
  }
  Tensor loss = f(params);
  if (loss.numel() != 1) throw ContractError("grad_check: f must return a scalar");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  double max_err = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto data = params[pi].mutable_data();
    for (size_t j = 0; j < data.size(); ++j) {
      const double orig = data[j];
      data[j] = orig + eps;
      const double fp = f(params).item();
      data[j] = orig - eps;
      const double fm = f(params).item();
      data[j] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[pi][j];
      max_err = std::max(max_err, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return max_err;
}

}  // namespace hedl
