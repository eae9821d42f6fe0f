#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "atsg/errors.hpp"

namespace atsg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles (last index fastest) with an optional
/// gradient buffer.
///
/// Tensor is a handle: copies share storage, clone() makes a deep copy. This
/// mirrors how the tape refers to operands and lets a parameter tensor be held
/// by the weights and by graph nodes at the same time.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : impl_(std::make_shared<Storage>()) {
    check_extents(shape);
    impl_->data.assign(shape_size(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<Storage>()) {
    check_extents(shape);
    if (shape_size(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_string(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }

  /// Rows/cols of a rank-2 tensor; a rank-1 tensor reads as a column vector.
  std::size_t rows() const { return impl_->shape[0]; }
  std::size_t cols() const { return rank() >= 2 ? impl_->shape[1] : 1; }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double& operator[](std::size_t i) { return impl_->data[i]; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double& at(std::size_t r, std::size_t c) { return impl_->data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  // Gradient bookkeeping mutates the shared storage, not the handle, so it is
  // available on const handles (closures capture operands by const copy).
  void set_requires_grad(bool v) const { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<double> grad() { return impl_->grad; }
  std::span<const double> grad() const { return impl_->grad; }

  /// Gradient buffer, allocated (zeroed) on first use.
  std::span<double> grad_buffer() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
  }
  void zero_grad() const { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }
  void drop_grad() const { impl_->grad.clear(); }

  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<Storage>(*impl_);
    return t;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  bool all_finite() const {
    return std::all_of(impl_->data.begin(), impl_->data.end(),
                       [](double v) { return std::isfinite(v); });
  }

  /// Throws NumericError naming `what` if any element is NaN/Inf.
  void check_finite(const std::string& what) const {
    if (!all_finite()) throw NumericError("non-finite value in " + what);
  }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };

  static void check_extents(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  }

  std::shared_ptr<Storage> impl_;
};

/// Records differentiable operations in execution order and replays their
/// gradient rules in reverse.
///
/// A disabled tape records nothing, which is how inference and finite-difference
/// evaluations avoid graph overhead. A Tape is single-threaded; use one tape per
/// thread.
class Tape {
 public:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  explicit Tape(bool enabled = true) : enabled_(enabled) {}

  static Tape no_grad() { return Tape(false); }

  bool enabled() const { return enabled_; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// True when an op over `inputs` must be recorded.
  bool needs_grad(std::initializer_list<const Tensor*> inputs) const {
    if (!enabled_) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
  }
  bool needs_grad(std::span<const Tensor> inputs) const {
    if (!enabled_) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  }

  /// Appends a node. `output` is marked as requiring grad. `rule` reads
  /// output.grad() and accumulates into the inputs' grad buffers.
  void record(std::vector<Tensor> inputs, Tensor output, std::function<void()> rule) {
    output.set_requires_grad(true);
    nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(rule)});
  }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded rule once, newest
  /// first. Gradients accumulate additively into existing buffers.
  void backward(const Tensor& loss) {
    if (loss.size() != 1)
      throw ContractError("backward() requires a scalar loss, got shape " + shape_string(loss.shape()));
    if (consumed_) throw ContractError("backward() already ran on this tape");
    loss.grad_buffer()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->output.has_grad()) continue;  // not on a path to the loss
      it->backward();
    }
    consumed_ = true;
    // Intermediate buffers are no longer needed once the rules have run.
    for (auto& node : nodes_) node.output.drop_grad();
  }

  void clear() {
    nodes_.clear();
    consumed_ = false;
  }

 private:
  std::vector<Node> nodes_;
  bool enabled_ = true;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Operations. Each computes its value eagerly and, when any input requires a
// gradient and the tape is enabled, records its backward rule.
// ---------------------------------------------------------------------------

namespace detail {

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

// C += A * B  with A m×k, B k×n, row-major.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = arow[l];
      if (av == 0.0) continue;
      const double* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A * B^T  with A m×k, B n×k.
inline void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t l = 0; l < k; ++l) s += arow[l] * brow[l];
      c[i * n + j] += s;
    }
  }
}

// C += A^T * B  with A k×m, B k×n.
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t l = 0; l < k; ++l) {
    const double* arow = a + l * m;
    const double* brow = b + l * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void accumulate(const Tensor& t, std::span<const double> g) {
  if (!t.requires_grad()) return;
  auto buf = t.grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

}  // namespace detail

/// C = A·B for A m×k and B k×n.
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " · " +
                         shape_string(b.shape()));
  Tensor c(Shape{m, n});
  detail::gemm_acc(a.data().data(), b.data().data(), c.data().data(), m, k, n);
  if (tape.needs_grad({&a, &b})) {
    tape.record({a, b}, c, [a, b, c, m, k, n]() mutable {
      const double* g = c.grad().data();
      if (a.requires_grad()) detail::gemm_nt_acc(g, b.data().data(), a.grad_buffer().data(), m, n, k);
      if (b.requires_grad()) detail::gemm_tn_acc(a.data().data(), g, b.grad_buffer().data(), k, m, n);
    });
  }
  return c;
}

inline Tensor transpose(Tape& tape, const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor t(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  if (tape.needs_grad({&a})) {
    tape.record({a}, t, [a, t, m, n]() mutable {
      auto g = t.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return t;
}

/// Elementwise sum of two same-shaped tensors.
inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shapes differ, " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor c(a.shape());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] + b[i];
  if (tape.needs_grad({&a, &b})) {
    tape.record({a, b}, c, [a, b, c]() mutable {
      detail::accumulate(a, c.grad());
      detail::accumulate(b, c.grad());
    });
  }
  return c;
}

/// Adds bias b[m] to every column of A[m×n].
inline Tensor add_bias(Tape& tape, const Tensor& a, const Tensor& bias) {
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.size() != m)
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match rows of " +
                         shape_string(a.shape()));
  Tensor c(a.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] = a[i * n + j] + bias[i];
  if (tape.needs_grad({&a, &bias})) {
    tape.record({a, bias}, c, [a, bias, c, m, n]() mutable {
      auto g = c.grad();
      detail::accumulate(a, g);
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[i] += g[i * n + j];
      }
    });
  }
  return c;
}

inline Tensor scale(Tape& tape, const Tensor& a, double s) {
  Tensor c(a.shape());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] * s;
  if (tape.needs_grad({&a})) {
    tape.record({a}, c, [a, c, s]() mutable {
      auto g = c.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
    });
  }
  return c;
}

/// max(x, 0); the gradient at exactly 0 is 0.
inline Tensor relu(Tape& tape, const Tensor& a) {
  Tensor c(a.shape());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] > 0.0 ? a[i] : 0.0;
  if (tape.needs_grad({&a})) {
    tape.record({a}, c, [a, c]() mutable {
      auto g = c.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (a[i] > 0.0) ga[i] += g[i];
    });
  }
  return c;
}

/// Row-wise softmax of an r×s matrix, max-subtracted for stability.
inline Tensor softmax_rows(Tape& tape, const Tensor& a) {
  detail::require_rank2(a, "softmax_rows");
  const std::size_t r = a.rows(), s = a.cols();
  Tensor p(a.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = a.data().data() + i * s;
    double* y = p.data().data() + i * s;
    double mx = x[0];
    for (std::size_t j = 0; j < s; ++j) {
      if (std::isnan(x[j])) throw NumericError("softmax_rows: NaN input in row " + std::to_string(i));
      mx = std::max(mx, x[j]);
    }
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: infinite input in row " + std::to_string(i));
    double sum = 0.0;
    for (std::size_t j = 0; j < s; ++j) sum += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < s; ++j) y[j] /= sum;
  }
  if (tape.needs_grad({&a})) {
    tape.record({a}, p, [a, p, r, s]() mutable {
      auto g = p.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < s; ++j) dot += g[i * s + j] * p[i * s + j];
        for (std::size_t j = 0; j < s; ++j) ga[i * s + j] += p[i * s + j] * (g[i * s + j] - dot);
      }
    });
  }
  return p;
}

/// Layer normalization of each column of X (D×N, or a length-D vector):
/// gamma ⊙ (x − mean) / sqrt(var + eps) + beta, with the biased variance.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.rows(), n = x.cols();
  if (gamma.size() != d || beta.size() != d)
    throw DimensionError("layer_norm: gamma/beta " + shape_string(gamma.shape()) + "/" +
                         shape_string(beta.shape()) + " do not match " + shape_string(x.shape()));
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  Tensor y(x.shape());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(n);
  for (std::size_t j = 0; j < n; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += x[i * n + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double c = x[i * n + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    inv_std[j] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      xhat[i * n + j] = (x[i * n + j] - mean) * inv_std[j];
      y[i * n + j] = gamma[i] * xhat[i * n + j] + beta[i];
    }
  }
  if (tape.needs_grad({&x, &gamma, &beta})) {
    tape.record({x, gamma, beta}, y,
                [x, gamma, beta, y, xhat = std::move(xhat), inv_std = std::move(inv_std), d, n]() mutable {
                  auto g = y.grad();
                  if (gamma.requires_grad()) {
                    auto gg = gamma.grad_buffer();
                    for (std::size_t i = 0; i < d; ++i)
                      for (std::size_t j = 0; j < n; ++j) gg[i] += g[i * n + j] * xhat[i * n + j];
                  }
                  if (beta.requires_grad()) {
                    auto gb = beta.grad_buffer();
                    for (std::size_t i = 0; i < d; ++i)
                      for (std::size_t j = 0; j < n; ++j) gb[i] += g[i * n + j];
                  }
                  if (x.requires_grad()) {
                    auto gx = x.grad_buffer();
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (std::size_t j = 0; j < n; ++j) {
                      // dxhat = g ⊙ gamma;  dx = inv_std · (dxhat − mean(dxhat) − xhat·mean(dxhat ⊙ xhat))
                      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                      for (std::size_t i = 0; i < d; ++i) {
                        const double dxh = g[i * n + j] * gamma[i];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[i * n + j];
                      }
                      for (std::size_t i = 0; i < d; ++i) {
                        const double dxh = g[i * n + j] * gamma[i];
                        gx[i * n + j] += inv_std[j] * (dxh - inv_d * sum_dxhat - xhat[i * n + j] * inv_d * sum_dxhat_xhat);
                      }
                    }
                  }
                });
  }
  return y;
}

/// Same data under a new shape of equal size. Returns a fresh tensor.
inline Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  Tensor c(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  if (tape.needs_grad({&a})) {
    tape.record({a}, c, [a, c]() mutable { detail::accumulate(a, c.grad()); });
  }
  return c;
}

/// Stacks matrices with equal column counts on top of each other.
inline Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t total_rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != n || p.rank() > 2)
      throw DimensionError("concat_rows: column count mismatch at " + shape_string(p.shape()));
    total_rows += p.rows();
  }
  Tensor c(parts.front().rank() == 1 ? Shape{total_rows} : Shape{total_rows, n});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), c.data().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.size();
  }
  if (tape.needs_grad(std::span<const Tensor>(parts))) {
    tape.record(parts, c, [parts, c]() mutable {
      auto g = c.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        detail::accumulate(p, g.subspan(off, p.size()));
        off += p.size();
      }
    });
  }
  return c;
}

/// Sum of all elements as a scalar tensor.
inline Tensor sum(Tape& tape, const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor c = Tensor::scalar(s);
  if (tape.needs_grad({&a})) {
    tape.record({a}, c, [a, c]() mutable {
      const double g = c.grad()[0];
      auto ga = a.grad_buffer();
      for (auto& v : ga) v += g;
    });
  }
  return c;
}

/// Elementwise product of two same-shaped tensors.
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shapes differ, " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor c(a.shape());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] * b[i];
  if (tape.needs_grad({&a, &b})) {
    tape.record({a, b}, c, [a, b, c]() mutable {
      auto g = c.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return c;
}

/// Convenience overload for callers that never need gradients.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape t(false);
  return matmul(t, a, b);
}

}  // namespace atsg
