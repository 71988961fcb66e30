#pragma once

// Dense row-major float64 tensors and a reverse-mode tape.
//
// Every primitive takes Var handles, computes its value eagerly, and records a
// backward closure on the tape that owns its inputs. backward() replays the
// closures in reverse creation order, which is a valid topological order
// because a node can only reference nodes created before it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cuimlm/errors.hpp"

namespace cuimlm {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != shape_size(shape_))
      throw ShapeError("tensor: " + std::to_string(data_.size()) + " values for shape " +
                       shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Last dimension.
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  /// Product of all but the last dimension.
  std::size_t rows() const { return cols() == 0 ? 0 : data_.size() / cols(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not scalar");
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

namespace kernel {

/// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C[k,n] += A[m,k]^T * B[m,n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// out[c,r] = in[r,c]
inline void transpose(std::size_t r, std::size_t c, const double* in, double* out) {
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
}

/// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  std::vector<double> bt(k * n);
  transpose(n, k, b, bt.data());
  gemm_nn(m, k, n, a, bt.data(), c);
}

}  // namespace kernel

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Gradient per registered parameter slot. Slots never registered on the
/// tape hold an empty tensor.
using Gradients = std::vector<Tensor>;

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// A leaf whose gradient is reported by backward() under `slot`.
  Var parameter(Tensor value, std::size_t slot) {
    Var v = push(std::move(value), true, {});
    nodes_[v.id].slot = slot;
    slots_.push_back(v.id);
    return v;
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Records a result node. `fn` runs during backward only if some input
  /// requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
  }
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& in : inputs) {
      if (in.tape != this) throw ShapeError("operand belongs to a different tape");
      needs = needs || nodes_[in.id].needs_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  /// Gradient accumulator of v, zero-initialized on first use. Null when v
  /// does not require a gradient.
  Tensor* grad_of(Var v) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return nullptr;
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }

  Gradients backward(Var loss) {
    if (loss.tape != this) throw ShapeError("backward: loss belongs to a different tape");
    if (value(loss).size() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(value(loss).shape()));
    for (Node& n : nodes_) n.grad = Tensor();
    if (Tensor* g = grad_of(loss)) g->fill(1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      // The closure may push to other nodes' grads, never to this one.
      Tensor g = std::move(n.grad);
      n.backward(*this, g);
      nodes_[i].grad = std::move(g);
    }
    std::size_t max_slot = 0;
    for (std::size_t id : slots_) max_slot = std::max(max_slot, nodes_[id].slot + 1);
    Gradients out(max_slot);
    for (std::size_t id : slots_) {
      Node& n = nodes_[id];
      out[n.slot] = n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
    }
    return out;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    std::size_t slot = 0;
    BackwardFn backward;
  };

  Var push(Tensor value, bool needs_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), needs_grad, 0, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> slots_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

inline void add_into(Tensor& dst, const Tensor& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

/// [m,k]x[k,n] -> [m,n], or batched [b,m,k]x[b,k,n] -> [b,m,n].
inline Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  std::size_t batch, m, k, n;
  if (A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(0)) {
    batch = 1, m = A.dim(0), k = A.dim(1), n = B.dim(1);
  } else if (A.rank() == 3 && B.rank() == 3 && A.dim(0) == B.dim(0) && A.dim(2) == B.dim(1)) {
    batch = A.dim(0), m = A.dim(1), k = A.dim(2), n = B.dim(2);
  } else {
    detail::shape_fail("matmul", A.shape(), B.shape());
  }
  Tensor C(A.rank() == 2 ? Shape{m, n} : Shape{batch, m, n});
  for (std::size_t t = 0; t < batch; ++t)
    kernel::gemm_nn(m, k, n, A.data() + t * m * k, B.data() + t * k * n, C.data() + t * m * n);
  return a.tape->record(std::move(C), {a, b}, [a, b, batch, m, k, n](Tape& tape, const Tensor& g) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (Tensor* ga = tape.grad_of(a))
      for (std::size_t t = 0; t < batch; ++t)
        kernel::gemm_nt(m, n, k, g.data() + t * m * n, B.data() + t * k * n, ga->data() + t * m * k);
    if (Tensor* gb = tape.grad_of(b))
      for (std::size_t t = 0; t < batch; ++t)
        kernel::gemm_tn(m, k, n, A.data() + t * m * k, g.data() + t * m * n, gb->data() + t * k * n);
  });
}

/// Swaps the last two dimensions of a rank-2 or rank-3 tensor.
inline Var transpose(Var a) {
  const Tensor& A = a.value();
  if (A.rank() != 2 && A.rank() != 3) throw ShapeError("transpose: expected rank 2 or 3, got " + shape_str(A.shape()));
  const std::size_t batch = A.rank() == 3 ? A.dim(0) : 1;
  const std::size_t r = A.dim(A.rank() - 2), c = A.dim(A.rank() - 1);
  Tensor T(A.rank() == 3 ? Shape{batch, c, r} : Shape{c, r});
  for (std::size_t t = 0; t < batch; ++t) kernel::transpose(r, c, A.data() + t * r * c, T.data() + t * r * c);
  return a.tape->record(std::move(T), {a}, [a, batch, r, c](Tape& tape, const Tensor& g) {
    Tensor* ga = tape.grad_of(a);
    std::vector<double> tmp(r * c);
    for (std::size_t t = 0; t < batch; ++t) {
      kernel::transpose(c, r, g.data() + t * r * c, tmp.data());
      for (std::size_t i = 0; i < r * c; ++i) ga->data()[t * r * c + i] += tmp[i];
    }
  });
}

inline Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) detail::shape_fail("add", A.shape(), B.shape());
  Tensor C = A;
  detail::add_into(C, B);
  return a.tape->record(std::move(C), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (Tensor* ga = tape.grad_of(a)) detail::add_into(*ga, g);
    if (Tensor* gb = tape.grad_of(b)) detail::add_into(*gb, g);
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) detail::shape_fail("mul", A.shape(), B.shape());
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= B[i];
  return a.tape->record(std::move(C), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (Tensor* ga = tape.grad_of(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.value()[i];
    if (Tensor* gb = tape.grad_of(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.value()[i];
  });
}

/// a + bias, bias broadcast along every leading dimension of a.
inline Var add_broadcast(Var a, Var bias) {
  const Tensor& A = a.value();
  const Tensor& B = bias.value();
  if (B.rank() != 1 || B.dim(0) != A.cols()) detail::shape_fail("add_broadcast", A.shape(), B.shape());
  Tensor C = A;
  const std::size_t n = A.cols();
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t j = 0; j < n; ++j) C.at(r, j) += B[j];
  return a.tape->record(std::move(C), {a, bias}, [a, bias, n](Tape& tape, const Tensor& g) {
    if (Tensor* ga = tape.grad_of(a)) detail::add_into(*ga, g);
    if (Tensor* gb = tape.grad_of(bias))
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g.at(r, j);
  });
}

inline Var scale(Var a, double s) {
  Tensor C = a.value();
  for (double& v : C.values()) v *= s;
  return a.tape->record(std::move(C), {a}, [a, s](Tape& tape, const Tensor& g) {
    Tensor* ga = tape.grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
  });
}

/// Sum of all entries, as a [1] tensor.
inline Var sum(Var a) {
  const Tensor& A = a.value();
  double s = 0.0;
  for (double v : A.values()) s += v;
  return a.tape->record(Tensor::scalar(s), {a}, [a](Tape& tape, const Tensor& g) {
    Tensor* ga = tape.grad_of(a);
    for (double& v : ga->values()) v += g[0];
  });
}

/// Same data, new shape.
inline Var reshape(Var a, Shape shape) {
  Tensor C = a.value().reshaped(std::move(shape));
  return a.tape->record(std::move(C), {a}, [a](Tape& tape, const Tensor& g) {
    Tensor* ga = tape.grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
}

/// Index value that makes gather_rows emit a zero row.
inline constexpr std::size_t kSkipRow = static_cast<std::size_t>(-1);

/// out[i] = table[ids[i]] for a [rows, n] table; kSkipRow yields a zero row.
/// Backward scatter-adds into the selected table rows.
inline Var gather_rows(Var table, std::vector<std::size_t> ids) {
  const Tensor& T = table.value();
  if (T.rank() != 2) throw ShapeError("gather_rows: table must be rank 2, got " + shape_str(T.shape()));
  const std::size_t n = T.dim(1);
  Tensor out({ids.size(), n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == kSkipRow) continue;
    if (ids[i] >= T.dim(0))
      throw ShapeError("gather_rows: row " + std::to_string(ids[i]) + " out of range for table " +
                       shape_str(T.shape()));
    std::copy_n(T.data() + ids[i] * n, n, out.data() + i * n);
  }
  return table.tape->record(std::move(out), {table}, [table, ids = std::move(ids), n](Tape& tape, const Tensor& g) {
    Tensor* gt = tape.grad_of(table);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] == kSkipRow) continue;
      double* dst = gt->data() + ids[i] * n;
      const double* src = g.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
    }
  });
}

/// Normalizes each row over the last dimension (population variance), then
/// applies gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& X = x.value();
  const std::size_t n = X.cols(), rows = X.rows();
  if (gain.value().shape() != Shape{n}) detail::shape_fail("layer_norm", X.shape(), gain.value().shape());
  if (bias.value().shape() != Shape{n}) detail::shape_fail("layer_norm", X.shape(), bias.value().shape());
  const Tensor& G = gain.value();
  const Tensor& B = bias.value();
  Tensor Y(X.shape());
  // xhat and 1/sigma per row, kept for backward.
  auto xhat = std::make_shared<Tensor>(X.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xr[j] - mean) * is;
      xhat->at(r, j) = h;
      Y.at(r, j) = h * G[j] + B[j];
    }
  }
  return x.tape->record(std::move(Y), {x, gain, bias},
                        [x, gain, bias, xhat, inv_std, n, rows](Tape& tape, const Tensor& g) {
    const Tensor& G = gain.value();
    if (Tensor* gg = tape.grad_of(gain))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) (*gg)[j] += g.at(r, j) * xhat->at(r, j);
    if (Tensor* gb = tape.grad_of(bias))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g.at(r, j);
    if (Tensor* gx = tape.grad_of(x)) {
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t r = 0; r < rows; ++r) {
        double sum_dh = 0.0, sum_dh_h = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double dh = g.at(r, j) * G[j];
          sum_dh += dh;
          sum_dh_h += dh * xhat->at(r, j);
        }
        for (std::size_t j = 0; j < n; ++j) {
          const double dh = g.at(r, j) * G[j];
          gx->at(r, j) += (*inv_std)[r] * (dh - inv_n * sum_dh - xhat->at(r, j) * inv_n * sum_dh_h);
        }
      }
    }
  });
}

/// Row-wise softmax over the last dimension. If `valid_cols` is non-empty it
/// gives, per leading index of a rank-3 input (or per row of a rank-2 input),
/// how many leading columns take part; the rest are treated as -inf and come
/// out as exact zeros.
inline Var softmax_rows(Var x, std::vector<std::size_t> valid_cols = {}) {
  const Tensor& X = x.value();
  const std::size_t n = X.cols(), rows = X.rows();
  const std::size_t rows_per_group = X.rank() == 3 ? X.dim(1) : 1;
  if (!valid_cols.empty() && valid_cols.size() * rows_per_group != rows)
    throw ShapeError("softmax_rows: " + std::to_string(valid_cols.size()) +
                     " column limits for input " + shape_str(X.shape()));
  Tensor Y(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t lim = valid_cols.empty() ? n : std::min(n, valid_cols[r / rows_per_group]);
    if (lim == 0) throw ShapeError("softmax_rows: row with no valid column");
    const double* xr = X.data() + r * n;
    double* yr = Y.data() + r * n;
    double mx = xr[0];
    for (std::size_t j = 1; j < lim; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < lim; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    for (std::size_t j = 0; j < lim; ++j) yr[j] /= z;
  }
  auto saved = std::make_shared<Tensor>(Y);
  return x.tape->record(std::move(Y), {x}, [x, saved, n, rows](Tape& tape, const Tensor& g) {
    Tensor* gx = tape.grad_of(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = saved->data() + r * n;
      const double* gr = g.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
      double* dst = gx->data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] += yr[j] * (gr[j] - dot);
    }
  });
}

/// Exact GELU: x * Phi(x).
inline Var gelu(Var x) {
  Tensor Y = x.value();
  for (double& v : Y.values()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return x.tape->record(std::move(Y), {x}, [x](Tape& tape, const Tensor& g) {
    const Tensor& X = x.value();
    Tensor* gx = tape.grad_of(x);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < X.size(); ++i) {
      const double v = X[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      (*gx)[i] += g[i] * (cdf + v * pdf);
    }
  });
}

inline double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Var sigmoid(Var x) {
  Tensor Y = x.value();
  for (double& v : Y.values()) v = stable_sigmoid(v);
  Tensor saved = Y;
  return x.tape->record(std::move(Y), {x}, [x, saved = std::move(saved)](Tape& tape, const Tensor& g) {
    Tensor* gx = tape.grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * saved[i] * (1.0 - saved[i]);
  });
}

/// Concatenates along axis 0 or along the last axis. All other dimensions
/// must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].value().shape();
  const std::size_t last = first.size() - 1;
  if (axis != 0 && axis != last) throw ShapeError("concat: axis must be 0 or the last axis");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.value().shape();
    if (s.size() != first.size()) detail::shape_fail("concat", first, s);
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != first[d]) detail::shape_fail("concat", first, s);
    out_shape[axis] += s[axis];
  }
  Tensor out(out_shape);
  if (axis == 0) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      std::copy(p.value().values().begin(), p.value().values().end(), out.data() + off);
      off += p.value().size();
    }
  } else {
    const std::size_t rows = out.rows(), width = out.cols();
    std::size_t col = 0;
    for (const Var& p : parts) {
      const Tensor& P = p.value();
      for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(P.data() + r * P.cols(), P.cols(), out.data() + r * width + col);
      col += P.cols();
    }
  }
  return parts[0].tape->record(std::move(out), parts, [parts, axis](Tape& tape, const Tensor& g) {
    if (axis == 0) {
      std::size_t off = 0;
      for (const Var& p : parts) {
        const std::size_t sz = p.value().size();
        if (Tensor* gp = tape.grad_of(p))
          for (std::size_t i = 0; i < sz; ++i) (*gp)[i] += g[off + i];
        off += sz;
      }
    } else {
      const std::size_t rows = g.rows(), width = g.cols();
      std::size_t col = 0;
      for (const Var& p : parts) {
        const std::size_t w = p.value().cols();
        if (Tensor* gp = tape.grad_of(p))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) gp->at(r, j) += g[r * width + col + j];
        col += w;
      }
    }
  });
}

/// [batch*seq, heads*head_dim] -> [batch*heads, seq, head_dim]
inline Var split_heads(Var x, std::size_t batch, std::size_t seq, std::size_t heads) {
  const Tensor& X = x.value();
  if (X.rank() != 2 || X.dim(0) != batch * seq || X.dim(1) % heads != 0)
    throw ShapeError("split_heads: input " + shape_str(X.shape()) + " does not match batch=" +
                     std::to_string(batch) + " seq=" + std::to_string(seq) + " heads=" + std::to_string(heads));
  const std::size_t hd = X.dim(1) / heads, width = X.dim(1);
  Tensor Y({batch * heads, seq, hd});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t s = 0; s < seq; ++s)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(X.data() + (b * seq + s) * width + h * hd, hd, Y.data() + ((b * heads + h) * seq + s) * hd);
  return x.tape->record(std::move(Y), {x}, [x, batch, seq, heads, hd, width](Tape& tape, const Tensor& g) {
    Tensor* gx = tape.grad_of(x);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t s = 0; s < seq; ++s)
        for (std::size_t h = 0; h < heads; ++h) {
          double* dst = gx->data() + (b * seq + s) * width + h * hd;
          const double* src = g.data() + ((b * heads + h) * seq + s) * hd;
          for (std::size_t j = 0; j < hd; ++j) dst[j] += src[j];
        }
  });
}

/// Inverse of split_heads: [batch*heads, seq, head_dim] -> [batch*seq, heads*head_dim]
inline Var merge_heads(Var x, std::size_t batch, std::size_t heads) {
  const Tensor& X = x.value();
  if (X.rank() != 3 || X.dim(0) != batch * heads)
    throw ShapeError("merge_heads: input " + shape_str(X.shape()) + " does not match batch=" +
                     std::to_string(batch) + " heads=" + std::to_string(heads));
  const std::size_t seq = X.dim(1), hd = X.dim(2), width = heads * hd;
  Tensor Y({batch * seq, width});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t s = 0; s < seq; ++s)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(X.data() + ((b * heads + h) * seq + s) * hd, hd, Y.data() + (b * seq + s) * width + h * hd);
  return x.tape->record(std::move(Y), {x}, [x, batch, seq, heads, hd, width](Tape& tape, const Tensor& g) {
    Tensor* gx = tape.grad_of(x);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t s = 0; s < seq; ++s)
        for (std::size_t h = 0; h < heads; ++h) {
          double* dst = gx->data() + ((b * heads + h) * seq + s) * hd;
          const double* src = g.data() + (b * seq + s) * width + h * hd;
          for (std::size_t j = 0; j < hd; ++j) dst[j] += src[j];
        }
  });
}

inline Gradients backward(Tape& tape, Var loss) { return tape.backward(loss); }

}  // namespace cuimlm
