#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hsvae/common.hpp"
#include "hsvae/rng.hpp"

namespace hsvae {

// Dense row-major matrices of doubles with define-by-run reverse-mode
// autodiff. Every value, including scalars ({1,1}) and row vectors ({1,k}),
// is a 2-d tensor; the graph is rebuilt on every forward pass and freed when
// the last handle to the loss is dropped.

class Tensor;

namespace detail {

inline std::atomic<uint64_t>& node_counter() {
  static std::atomic<uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

struct TensorNode {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> data;
  std::vector<double> grad;  // sized by backward(); same length as data
  bool requires_grad = false;
  bool leaf = true;
  uint64_t seq = 0;  // creation order; reverse order is a valid adjoint order
  std::string name;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  int64_t numel() const { return rows * cols; }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    else std::fill(grad.begin(), grad.end(), 0.0);
  }
};

// Disables graph recording in scope; eval/sampling paths use it so large
// batches do not retain activations.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(int64_t rows, int64_t cols, bool requires_grad = false) {
    return full(rows, cols, 0.0, requires_grad);
  }

  static Tensor ones(int64_t rows, int64_t cols, bool requires_grad = false) {
    return full(rows, cols, 1.0, requires_grad);
  }

  static Tensor full(int64_t rows, int64_t cols, double value, bool requires_grad = false) {
    check_extents(rows, cols);
    auto n = fresh_node(rows, cols);
    n->data.assign(static_cast<size_t>(rows * cols), value);
    n->requires_grad = requires_grad && detail::grad_mode();
    return Tensor(std::move(n));
  }

  static Tensor from_data(int64_t rows, int64_t cols, std::vector<double> data,
                          bool requires_grad = false) {
    check_extents(rows, cols);
    if (static_cast<int64_t>(data.size()) != rows * cols)
      throw ValueError(detail::str("from_data: ", rows, "x", cols, " needs ", rows * cols,
                                   " values, got ", data.size()));
    auto n = fresh_node(rows, cols);
    n->data = std::move(data);
    n->requires_grad = requires_grad && detail::grad_mode();
    return Tensor(std::move(n));
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return full(1, 1, value, requires_grad);
  }

  static Tensor randn(int64_t rows, int64_t cols, Rng& rng, bool requires_grad = false) {
    check_extents(rows, cols);
    auto n = fresh_node(rows, cols);
    n->data.resize(static_cast<size_t>(rows * cols));
    for (auto& v : n->data) v = rng.normal();
    n->requires_grad = requires_grad && detail::grad_mode();
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  int64_t rows() const { return node().rows; }
  int64_t cols() const { return node().cols; }
  int64_t numel() const { return node().numel(); }
  std::pair<int64_t, int64_t> shape() const { return {rows(), cols()}; }
  bool requires_grad() const { return node().requires_grad; }
  bool is_leaf() const { return node().leaf; }

  const std::string& name() const { return node().name; }
  Tensor& set_name(std::string name) {
    node().name = std::move(name);
    return *this;
  }

  std::span<const double> data() const { return {node().data.data(), node().data.size()}; }

  // Leaf initialization and optimizer updates only; graph intermediates are
  // immutable once written.
  std::span<double> mutable_data() {
    if (!node().leaf)
      throw ValueError("mutable_data: only leaf tensors may be mutated");
    return {node().data.data(), node().data.size()};
  }

  std::span<const double> grad() const {
    if (node().grad.size() != node().data.size())
      throw ValueError(detail::str("grad: no gradient populated for tensor '", node().name,
                                   "'; run backward() first"));
    return {node().grad.data(), node().grad.size()};
  }

  bool has_grad() const { return node().grad.size() == node().data.size(); }

  double at(int64_t r, int64_t c) const {
    if (r < 0 || r >= rows() || c < 0 || c >= cols())
      throw ValueError(detail::str("at: index (", r, ",", c, ") out of range for ", rows(), "x", cols()));
    return node().data[static_cast<size_t>(r * cols() + c)];
  }

  // Value of a scalar tensor.
  double value() const {
    if (numel() != 1)
      throw ValueError(detail::str("value: tensor is ", rows(), "x", cols(), ", not scalar"));
    return node().data[0];
  }

  TensorNode& node() {
    if (!node_) throw ValueError("operation on undefined tensor");
    return *node_;
  }
  const TensorNode& node() const {
    if (!node_) throw ValueError("operation on undefined tensor");
    return *node_;
  }
  const std::shared_ptr<TensorNode>& ptr() const { return node_; }

  static std::shared_ptr<TensorNode> fresh_node(int64_t rows, int64_t cols) {
    auto n = std::make_shared<TensorNode>();
    n->rows = rows;
    n->cols = cols;
    n->seq = detail::node_counter().fetch_add(1, std::memory_order_relaxed);
    return n;
  }

  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

 private:
  static void check_extents(int64_t rows, int64_t cols) {
    if (rows < 1 || cols < 1)
      throw ValueError(detail::str("tensor extents must be >= 1, got ", rows, "x", cols));
  }

  std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline std::string shape_str(const TensorNode& n) {
  return str(n.rows, "x", n.cols);
}

// Result node of an op: tracks parents and a backprop function only when grad
// mode is on and some input requires grad.
inline Tensor make_result(int64_t rows, int64_t cols,
                          std::vector<std::shared_ptr<TensorNode>> parents,
                          std::function<void(TensorNode&)> backprop) {
  auto n = Tensor::fresh_node(rows, cols);
  n->data.resize(static_cast<size_t>(rows * cols));
  bool track = grad_mode();
  if (track) {
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    track = any;
  }
  if (track) {
    n->requires_grad = true;
    n->leaf = false;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Tensor(n);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Deterministic matrix kernels. Evaluation order is fixed; std::fma keeps the
// inner loops fast with -ffp-contract=off.
// ---------------------------------------------------------------------------

namespace detail {

// C += A(m x k) * B(k x p)
inline void mm_acc_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t p) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * p;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      const double* brow = b + kk * p;
      for (int64_t j = 0; j < p; ++j) crow[j] = std::fma(aik, brow[j], crow[j]);
    }
  }
}

// C += A(m x k) * B(p x k)^T ; rows of A dotted with rows of B.
inline void mm_acc_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t p) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * p;
    for (int64_t j = 0; j < p; ++j) {
      const double* brow = b + j * k;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      int64_t kk = 0;
      for (; kk + 4 <= k; kk += 4) {
        s0 = std::fma(arow[kk + 0], brow[kk + 0], s0);
        s1 = std::fma(arow[kk + 1], brow[kk + 1], s1);
        s2 = std::fma(arow[kk + 2], brow[kk + 2], s2);
        s3 = std::fma(arow[kk + 3], brow[kk + 3], s3);
      }
      double s = ((s0 + s1) + s2) + s3;
      for (; kk < k; ++kk) s = std::fma(arow[kk], brow[kk], s);
      crow[j] += s;
    }
  }
}

// C += A(k x m)^T * B(k x p)
inline void mm_acc_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t p) {
  for (int64_t kk = 0; kk < k; ++kk) {
    const double* arow = a + kk * m;
    const double* brow = b + kk * p;
    for (int64_t i = 0; i < m; ++i) {
      const double aik = arow[i];
      double* crow = c + i * p;
      for (int64_t j = 0; j < p; ++j) crow[j] = std::fma(aik, brow[j], crow[j]);
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const int64_t m = a.rows(), k = a.cols(), p = b.cols();
  if (b.rows() != k)
    throw ValueError(detail::str("matmul: inner extents disagree, ", detail::shape_str(a.node()),
                                 " x ", detail::shape_str(b.node())));
  auto ap = a.ptr(), bp = b.ptr();
  Tensor out = detail::make_result(m, p, {ap, bp}, [ap, bp, m, k, p](TensorNode& self) {
    if (ap->requires_grad) {
      // dA = G * B^T
      detail::mm_acc_nt(self.grad.data(), bp->data.data(), ap->grad.data(), m, p, k);
    }
    if (bp->requires_grad) {
      // dB = A^T * G
      detail::mm_acc_tn(ap->data.data(), self.grad.data(), bp->grad.data(), k, m, p);
    }
  });
  std::fill(out.node().data.begin(), out.node().data.end(), 0.0);
  detail::mm_acc_nn(ap->data.data(), bp->data.data(), out.node().data.data(), m, k, p);
  return out;
}

// ---------------------------------------------------------------------------
// Broadcasting elementwise binary ops. Shapes must match, or an operand may be
// scalar {1,1}, a row {1,c}, or a column {r,1} against an {r,c} partner.
// Adjoints of a broadcast operand are summed over the broadcast axes.
// ---------------------------------------------------------------------------

namespace detail {

struct BinOpShapes {
  int64_t rows, cols;  // output
};

inline BinOpShapes binop_shape(const TensorNode& a, const TensorNode& b, const char* opname) {
  const bool ra = a.rows == 1 || b.rows == 1 || a.rows == b.rows;
  const bool ca = a.cols == 1 || b.cols == 1 || a.cols == b.cols;
  if (!ra || !ca)
    throw ValueError(str(opname, ": shapes not broadcastable, ", shape_str(a), " vs ", shape_str(b)));
  return {std::max(a.rows, b.rows), std::max(a.cols, b.cols)};
}

inline size_t bc_index(const TensorNode& t, int64_t r, int64_t c) {
  const int64_t rr = t.rows == 1 ? 0 : r;
  const int64_t cc = t.cols == 1 ? 0 : c;
  return static_cast<size_t>(rr * t.cols + cc);
}

// fwd(x, y) -> value; dfdx/dfdy evaluated at (x, y, out).
template <typename Fwd, typename DfdX, typename DfdY>
Tensor binop(const Tensor& a, const Tensor& b, const char* opname, Fwd fwd, DfdX dfdx, DfdY dfdy) {
  auto ap = a.ptr(), bp = b.ptr();
  const auto sh = binop_shape(*ap, *bp, opname);
  Tensor out = detail::make_result(sh.rows, sh.cols, {ap, bp},
                                   [ap, bp, sh, dfdx, dfdy](TensorNode& self) {
    for (int64_t r = 0; r < sh.rows; ++r) {
      for (int64_t c = 0; c < sh.cols; ++c) {
        const size_t oi = static_cast<size_t>(r * sh.cols + c);
        const double g = self.grad[oi];
        const double x = ap->data[bc_index(*ap, r, c)];
        const double y = bp->data[bc_index(*bp, r, c)];
        const double o = self.data[oi];
        if (ap->requires_grad) ap->grad[bc_index(*ap, r, c)] += g * dfdx(x, y, o);
        if (bp->requires_grad) bp->grad[bc_index(*bp, r, c)] += g * dfdy(x, y, o);
      }
    }
  });
  auto& od = out.node().data;
  if (ap->rows == sh.rows && ap->cols == sh.cols && bp->rows == sh.rows && bp->cols == sh.cols) {
    const double* xa = ap->data.data();
    const double* xb = bp->data.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = fwd(xa[i], xb[i]);
  } else {
    for (int64_t r = 0; r < sh.rows; ++r)
      for (int64_t c = 0; c < sh.cols; ++c)
        od[static_cast<size_t>(r * sh.cols + c)] =
            fwd(ap->data[bc_index(*ap, r, c)], bp->data[bc_index(*bp, r, c)]);
  }
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binop(a, b, "add",
                       [](double x, double y) { return x + y; },
                       [](double, double, double) { return 1.0; },
                       [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binop(a, b, "sub",
                       [](double x, double y) { return x - y; },
                       [](double, double, double) { return 1.0; },
                       [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binop(a, b, "mul",
                       [](double x, double y) { return x * y; },
                       [](double, double y, double) { return y; },
                       [](double x, double, double) { return x; });
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
  for (size_t i = 0; i < b.data().size(); ++i)
    if (b.data()[i] == 0.0)
      throw ValueError(detail::str("divide: divisor element ", i, " is exactly zero"));
  return detail::binop(a, b, "divide",
                       [](double x, double y) { return x / y; },
                       [](double, double y, double) { return 1.0 / y; },
                       [](double, double y, double o) { return -o / y; });
}

inline Tensor add(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor sub(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor sub(double s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
inline Tensor mul(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }

// ---------------------------------------------------------------------------
// Unary elementwise ops.
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fwd, typename Dfdx>
Tensor unop(const Tensor& a, Fwd fwd, Dfdx dfdx) {
  auto ap = a.ptr();
  Tensor out = detail::make_result(ap->rows, ap->cols, {ap}, [ap, dfdx](TensorNode& self) {
    if (!ap->requires_grad) return;
    for (size_t i = 0; i < self.data.size(); ++i)
      ap->grad[i] += self.grad[i] * dfdx(ap->data[i], self.data[i]);
  });
  auto& od = out.node().data;
  const double* x = ap->data.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = fwd(x[i]);
  return out;
}

}  // namespace detail

inline Tensor neg(const Tensor& a) {
  return detail::unop(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}
inline Tensor operator-(const Tensor& a) { return neg(a); }

inline Tensor square(const Tensor& a) {
  return detail::unop(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor sqrt_(const Tensor& a) {
  const auto d = a.data();
  for (size_t i = 0; i < d.size(); ++i)
    if (d[i] < 0.0)
      throw ValueError(detail::str("sqrt: negative input ", d[i], " at element ", i));
  return detail::unop(a, [](double x) { return std::sqrt(x); },
                      [](double, double o) { return 0.5 / o; });
}

inline Tensor exp_(const Tensor& a) {
  return detail::unop(a, [](double x) { return std::exp(x); }, [](double, double o) { return o; });
}

inline Tensor log_(const Tensor& a) {
  const auto d = a.data();
  for (size_t i = 0; i < d.size(); ++i)
    if (d[i] <= 0.0)
      throw ValueError(detail::str("log: non-positive input ", d[i], " at element ", i));
  return detail::unop(a, [](double x) { return std::log(x); },
                      [](double x, double) { return 1.0 / x; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unop(a, [](double x) { return x > 0.0 ? x : 0.0; },
                      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unop(a,
                      [](double x) {
                        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
                        const double e = std::exp(x);
                        return e / (1.0 + e);
                      },
                      [](double, double o) { return o * (1.0 - o); });
}

// ---------------------------------------------------------------------------
// Reductions. std/variance use the population convention (divide by N): the
// batch statistics of the losses are treated as plain differentiable
// quantities, and N-1 blows up at tiny batches.
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
  auto ap = a.ptr();
  Tensor out = detail::make_result(1, 1, {ap}, [ap](TensorNode& self) {
    if (!ap->requires_grad) return;
    const double g = self.grad[0];
    for (auto& v : ap->grad) v += g;
  });
  double s = 0.0;
  for (double v : ap->data) s += v;
  out.node().data[0] = s;
  return out;
}

inline Tensor mean_all(const Tensor& a) {
  auto ap = a.ptr();
  const double inv = 1.0 / static_cast<double>(ap->numel());
  Tensor out = detail::make_result(1, 1, {ap}, [ap, inv](TensorNode& self) {
    if (!ap->requires_grad) return;
    const double g = self.grad[0] * inv;
    for (auto& v : ap->grad) v += g;
  });
  double s = 0.0;
  for (double v : ap->data) s += v;
  out.node().data[0] = s * inv;
  return out;
}

namespace detail {

inline void check_axis(int axis, const char* opname) {
  if (axis != 0 && axis != 1) throw ValueError(str(opname, ": axis must be 0 or 1, got ", axis));
}

}  // namespace detail

// axis 0: column-wise over rows -> {1,c}; axis 1: row-wise over cols -> {r,1}.
inline Tensor sum(const Tensor& a, int axis) {
  detail::check_axis(axis, "sum");
  auto ap = a.ptr();
  const int64_t r = ap->rows, c = ap->cols;
  const int64_t or_ = axis == 0 ? 1 : r, oc = axis == 0 ? c : 1;
  Tensor out = detail::make_result(or_, oc, {ap}, [ap, axis, r, c](TensorNode& self) {
    if (!ap->requires_grad) return;
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j)
        ap->grad[static_cast<size_t>(i * c + j)] += self.grad[static_cast<size_t>(axis == 0 ? j : i)];
  });
  auto& od = out.node().data;
  std::fill(od.begin(), od.end(), 0.0);
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j)
      od[static_cast<size_t>(axis == 0 ? j : i)] += ap->data[static_cast<size_t>(i * c + j)];
  return out;
}

inline Tensor mean(const Tensor& a, int axis) {
  detail::check_axis(axis, "mean");
  const double extent = static_cast<double>(axis == 0 ? a.rows() : a.cols());
  return mul(sum(a, axis), 1.0 / extent);
}

namespace detail {

// Shared forward for variance/std (population), axis as in sum().
struct MomentPlan {
  int64_t r, c, or_, oc, extent;
  std::vector<double> mean;  // per output element
};

inline MomentPlan column_moments(const TensorNode& a, int axis, const char* opname) {
  MomentPlan p;
  p.r = a.rows;
  p.c = a.cols;
  p.or_ = axis == 0 ? 1 : p.r;
  p.oc = axis == 0 ? p.c : 1;
  p.extent = axis == 0 ? p.r : p.c;
  if (p.extent < 2)
    throw ValueError(str(opname, ": axis extent must be >= 2, got ", p.extent));
  p.mean.assign(static_cast<size_t>(p.or_ * p.oc), 0.0);
  for (int64_t i = 0; i < p.r; ++i)
    for (int64_t j = 0; j < p.c; ++j)
      p.mean[static_cast<size_t>(axis == 0 ? j : i)] += a.data[static_cast<size_t>(i * p.c + j)];
  for (auto& m : p.mean) m /= static_cast<double>(p.extent);
  return p;
}

}  // namespace detail

inline Tensor variance(const Tensor& a, int axis) {
  detail::check_axis(axis, "variance");
  auto ap = a.ptr();
  auto plan = detail::column_moments(*ap, axis, "variance");
  const double inv = 1.0 / static_cast<double>(plan.extent);
  auto mean = std::make_shared<std::vector<double>>(plan.mean);
  Tensor out = detail::make_result(plan.or_, plan.oc, {ap},
                                   [ap, axis, plan, mean, inv](TensorNode& self) {
    if (!ap->requires_grad) return;
    for (int64_t i = 0; i < plan.r; ++i)
      for (int64_t j = 0; j < plan.c; ++j) {
        const size_t oi = static_cast<size_t>(axis == 0 ? j : i);
        const size_t xi = static_cast<size_t>(i * plan.c + j);
        ap->grad[xi] += self.grad[oi] * 2.0 * inv * (ap->data[xi] - (*mean)[oi]);
      }
  });
  auto& od = out.node().data;
  std::fill(od.begin(), od.end(), 0.0);
  for (int64_t i = 0; i < plan.r; ++i)
    for (int64_t j = 0; j < plan.c; ++j) {
      const size_t oi = static_cast<size_t>(axis == 0 ? j : i);
      const double d = ap->data[static_cast<size_t>(i * plan.c + j)] - plan.mean[oi];
      od[oi] += d * d;
    }
  for (auto& v : od) v *= inv;
  return out;
}

// Population standard deviation. Not differentiable where the spread is
// exactly zero (the derivative has a 1/std factor).
inline Tensor stddev(const Tensor& a, int axis) {
  detail::check_axis(axis, "stddev");
  auto ap = a.ptr();
  auto plan = detail::column_moments(*ap, axis, "stddev");
  const double inv = 1.0 / static_cast<double>(plan.extent);
  auto mean = std::make_shared<std::vector<double>>(plan.mean);
  Tensor out = detail::make_result(plan.or_, plan.oc, {ap},
                                   [ap, axis, plan, mean, inv](TensorNode& self) {
    if (!ap->requires_grad) return;
    for (int64_t i = 0; i < plan.r; ++i)
      for (int64_t j = 0; j < plan.c; ++j) {
        const size_t oi = static_cast<size_t>(axis == 0 ? j : i);
        const size_t xi = static_cast<size_t>(i * plan.c + j);
        const double s = self.data[oi];
        ap->grad[xi] += self.grad[oi] * inv * (ap->data[xi] - (*mean)[oi]) / s;
      }
  });
  auto& od = out.node().data;
  std::fill(od.begin(), od.end(), 0.0);
  for (int64_t i = 0; i < plan.r; ++i)
    for (int64_t j = 0; j < plan.c; ++j) {
      const size_t oi = static_cast<size_t>(axis == 0 ? j : i);
      const double d = ap->data[static_cast<size_t>(i * plan.c + j)] - plan.mean[oi];
      od[oi] += d * d;
    }
  for (auto& v : od) v = std::sqrt(v * inv);
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

inline Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1) {
  auto ap = a.ptr();
  const int64_t r = ap->rows, c = ap->cols;
  if (c0 < 0 || c1 > c || c0 >= c1)
    throw ValueError(detail::str("slice_cols: range [", c0, ",", c1, ") invalid for ", c, " cols"));
  const int64_t w = c1 - c0;
  Tensor out = detail::make_result(r, w, {ap}, [ap, c0, w, r, c](TensorNode& self) {
    if (!ap->requires_grad) return;
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < w; ++j)
        ap->grad[static_cast<size_t>(i * c + c0 + j)] += self.grad[static_cast<size_t>(i * w + j)];
  });
  auto& od = out.node().data;
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < w; ++j)
      od[static_cast<size_t>(i * w + j)] = ap->data[static_cast<size_t>(i * c + c0 + j)];
  return out;
}

inline Tensor reshape(const Tensor& a, int64_t rows, int64_t cols) {
  auto ap = a.ptr();
  if (rows * cols != ap->numel())
    throw ValueError(detail::str("reshape: ", detail::shape_str(*ap), " has ", ap->numel(),
                                 " elements, target ", rows, "x", cols));
  Tensor out = detail::make_result(rows, cols, {ap}, [ap](TensorNode& self) {
    if (!ap->requires_grad) return;
    for (size_t i = 0; i < self.grad.size(); ++i) ap->grad[i] += self.grad[i];
  });
  out.node().data = ap->data;
  return out;
}

inline Tensor transpose(const Tensor& a) {
  auto ap = a.ptr();
  const int64_t r = ap->rows, c = ap->cols;
  Tensor out = detail::make_result(c, r, {ap}, [ap, r, c](TensorNode& self) {
    if (!ap->requires_grad) return;
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j)
        ap->grad[static_cast<size_t>(i * c + j)] += self.grad[static_cast<size_t>(j * r + i)];
  });
  auto& od = out.node().data;
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) od[static_cast<size_t>(j * r + i)] = ap->data[static_cast<size_t>(i * c + j)];
  return out;
}

// Reverse cumulative sum along each row: out[i][k] = x[i][k] + out[i][k+1].
// Entries of a suffix accumulate in descending column order; the adjoint is
// the matching forward cumulative sum of the incoming gradient.
inline Tensor suffix_cumsum(const Tensor& a) {
  auto ap = a.ptr();
  const int64_t r = ap->rows, c = ap->cols;
  Tensor out = detail::make_result(r, c, {ap}, [ap, r, c](TensorNode& self) {
    if (!ap->requires_grad) return;
    for (int64_t i = 0; i < r; ++i) {
      double acc = 0.0;
      for (int64_t j = 0; j < c; ++j) {
        acc += self.grad[static_cast<size_t>(i * c + j)];
        ap->grad[static_cast<size_t>(i * c + j)] += acc;
      }
    }
  });
  auto& od = out.node().data;
  for (int64_t i = 0; i < r; ++i) {
    double acc = 0.0;
    for (int64_t j = c - 1; j >= 0; --j) {
      acc += ap->data[static_cast<size_t>(i * c + j)];
      od[static_cast<size_t>(i * c + j)] = acc;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Minimal strided valid-padding convolution, enough for the small conv
// classifier. Images are flattened rows: x {batch, in_c*h*w},
// w {out_c, in_c*kh*kw}, bias {1, out_c}; output {batch, out_c*oh*ow}.
// ---------------------------------------------------------------------------

struct Conv2dSpec {
  int64_t in_channels = 1;
  int64_t height = 0;
  int64_t width = 0;
  int64_t kernel = 0;  // square kernel
  int64_t stride = 1;

  int64_t out_height() const { return (height - kernel) / stride + 1; }
  int64_t out_width() const { return (width - kernel) / stride + 1; }
};

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv2dSpec& spec) {
  const int64_t batch = x.rows();
  const int64_t in_c = spec.in_channels, h = spec.height, wd = spec.width;
  const int64_t kk = spec.kernel, st = spec.stride;
  if (kk < 1 || st < 1 || h < kk || wd < kk)
    throw ValueError(detail::str("conv2d: invalid geometry k=", kk, " stride=", st, " h=", h, " w=", wd));
  if (x.cols() != in_c * h * wd)
    throw ValueError(detail::str("conv2d: input cols ", x.cols(), " != ", in_c * h * wd));
  const int64_t out_c = w.rows();
  const int64_t patch = in_c * kk * kk;
  if (w.cols() != patch)
    throw ValueError(detail::str("conv2d: weight cols ", w.cols(), " != ", patch));
  if (bias.rows() != 1 || bias.cols() != out_c)
    throw ValueError(detail::str("conv2d: bias must be 1x", out_c));
  const int64_t oh = spec.out_height(), ow = spec.out_width();

  auto xp = x.ptr(), wp = w.ptr(), bp = bias.ptr();

  // Patch gather indices, shared by forward and backward.
  auto idx = std::make_shared<std::vector<int64_t>>();
  idx->reserve(static_cast<size_t>(oh * ow * patch));
  for (int64_t oy = 0; oy < oh; ++oy)
    for (int64_t ox = 0; ox < ow; ++ox)
      for (int64_t ci = 0; ci < in_c; ++ci)
        for (int64_t ky = 0; ky < kk; ++ky)
          for (int64_t kx = 0; kx < kk; ++kx)
            idx->push_back(ci * h * wd + (oy * st + ky) * wd + (ox * st + kx));

  const int64_t opix = oh * ow;
  Tensor out = detail::make_result(batch, out_c * opix, {xp, wp, bp},
                                   [xp, wp, bp, idx, batch, out_c, opix, patch](TensorNode& self) {
    std::vector<double> col(static_cast<size_t>(opix * patch));
    std::vector<double> gcol(static_cast<size_t>(opix * patch));
    for (int64_t s = 0; s < batch; ++s) {
      const double* xr = xp->data.data() + s * xp->cols;
      for (size_t t = 0; t < col.size(); ++t) col[t] = xr[(*idx)[t]];
      // grad layout for sample: self.grad row is [out_c][opix]
      const double* gr = self.grad.data() + static_cast<size_t>(s) * self.cols;
      if (wp->requires_grad) {
        // dW[oc][q] += sum_pix g[oc][pix] * col[pix][q]
        for (int64_t oc = 0; oc < out_c; ++oc) {
          double* wrow = wp->grad.data() + oc * patch;
          for (int64_t pix = 0; pix < opix; ++pix) {
            const double g = gr[oc * opix + pix];
            const double* crow = col.data() + pix * patch;
            for (int64_t q = 0; q < patch; ++q) wrow[q] = std::fma(g, crow[q], wrow[q]);
          }
        }
      }
      if (bp->requires_grad) {
        for (int64_t oc = 0; oc < out_c; ++oc) {
          double acc = 0.0;
          for (int64_t pix = 0; pix < opix; ++pix) acc += gr[oc * opix + pix];
          bp->grad[static_cast<size_t>(oc)] += acc;
        }
      }
      if (xp->requires_grad) {
        std::fill(gcol.begin(), gcol.end(), 0.0);
        // gcol[pix][q] = sum_oc g[oc][pix] * W[oc][q]
        for (int64_t oc = 0; oc < out_c; ++oc) {
          const double* wrow = wp->data.data() + oc * patch;
          for (int64_t pix = 0; pix < opix; ++pix) {
            const double g = gr[oc * opix + pix];
            double* crow = gcol.data() + pix * patch;
            for (int64_t q = 0; q < patch; ++q) crow[q] = std::fma(g, wrow[q], crow[q]);
          }
        }
        double* gx = xp->grad.data() + static_cast<size_t>(s) * xp->cols;
        for (size_t t = 0; t < gcol.size(); ++t) gx[(*idx)[t]] += gcol[t];
      }
    }
  });

  auto& od = out.node().data;
  std::vector<double> col(static_cast<size_t>(opix * patch));
  for (int64_t s = 0; s < batch; ++s) {
    const double* xr = xp->data.data() + s * xp->cols;
    for (size_t t = 0; t < col.size(); ++t) col[t] = xr[(*idx)[t]];
    double* orow = od.data() + static_cast<size_t>(s) * (out_c * opix);
    for (int64_t oc = 0; oc < out_c; ++oc) {
      const double* wrow = wp->data.data() + oc * patch;
      const double b = bp->data[static_cast<size_t>(oc)];
      for (int64_t pix = 0; pix < opix; ++pix) {
        const double* crow = col.data() + pix * patch;
        double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
        int64_t q = 0;
        for (; q + 4 <= patch; q += 4) {
          s0 = std::fma(wrow[q + 0], crow[q + 0], s0);
          s1 = std::fma(wrow[q + 1], crow[q + 1], s1);
          s2 = std::fma(wrow[q + 2], crow[q + 2], s2);
          s3 = std::fma(wrow[q + 3], crow[q + 3], s3);
        }
        double acc = ((s0 + s1) + s2) + s3;
        for (; q < patch; ++q) acc = std::fma(wrow[q], crow[q], acc);
        orow[oc * opix + pix] = acc + b;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward: reverse-mode sweep. Nodes reachable from the loss are visited in
// reverse creation order, which is a topological order for a define-by-run
// graph; every requires_grad leaf ends up with grad = d loss / d leaf.
// ---------------------------------------------------------------------------

inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ValueError(detail::str("backward: loss must be scalar, got ",
                                 detail::shape_str(loss.node())));
  // A loss with no recorded dependencies is a constant; every gradient is
  // zero and there is nothing to sweep.
  if (!loss.requires_grad()) return;

  // Collect the reachable requires_grad subgraph.
  std::vector<TensorNode*> nodes;
  std::vector<TensorNode*> stack{&const_cast<Tensor&>(loss).node()};
  // seq values are unique; use a sorted visited list keyed by pointer.
  std::vector<const TensorNode*> visited;
  auto mark = [&visited](const TensorNode* n) {
    auto it = std::lower_bound(visited.begin(), visited.end(), n);
    if (it != visited.end() && *it == n) return false;
    visited.insert(it, n);
    return true;
  };
  mark(stack.back());
  while (!stack.empty()) {
    TensorNode* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (auto& p : n->parents)
      if (p->requires_grad && mark(p.get())) stack.push_back(p.get());
  }

  std::sort(nodes.begin(), nodes.end(),
            [](const TensorNode* a, const TensorNode* b) { return a->seq > b->seq; });

  for (TensorNode* n : nodes) n->ensure_grad();
  const_cast<Tensor&>(loss).node().grad[0] = 1.0;
  for (TensorNode* n : nodes)
    if (n->backprop) n->backprop(*n);
}

}  // namespace hsvae
