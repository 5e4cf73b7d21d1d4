#pragma once

// Dense row-major float tensors with a tape-based reverse-mode autodiff.
//
// A Var is a shared handle to a Node (value + gradient buffer). Operations take
// an optional Tape; when a tape is given and any input requires a gradient the
// operation is recorded and its output requires a gradient too. Passing a null
// tape runs the operation as plain inference.
//
// Reductions accumulate in double and round once, which keeps finite-difference
// checks meaningful at 32-bit precision.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ipcs/errors.hpp"

namespace ipcs {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)), values_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (shape_numel(shape_) != values_.size()) {
      throw DimensionError("tensor shape " + shape_str(shape_) + " does not hold " +
                           std::to_string(values_.size()) + " values");
    }
  }

  static Tensor scalar(float v) { return Tensor({}, std::vector<float>{v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return values_.size(); }
  std::size_t rank() const { return shape_.size(); }
  /// Leading dimension; 1 for scalars.
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  /// Product of trailing dimensions; 1 for scalars and vectors.
  std::size_t cols() const {
    if (shape_.size() < 2) return 1;
    std::size_t c = 1;
    for (std::size_t d = 1; d < shape_.size(); ++d) c *= shape_[d];
    return c;
  }

  float& operator[](std::size_t i) { return values_[i]; }
  float operator[](std::size_t i) const { return values_[i]; }
  float& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  float operator()(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  std::span<float> values() { return values_; }
  std::span<const float> values() const { return values_; }
  std::vector<float>& storage() { return values_; }
  const std::vector<float>& storage() const { return values_; }
  float item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return values_[0];
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<float> values_;
};

struct Node {
  Tensor value;
  std::vector<float> grad;
  bool requires_grad = false;
  std::string name;

  void ensure_grad() {
    if (grad.size() != value.numel()) grad.assign(value.numel(), 0.0f);
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }
};

using Var = std::shared_ptr<Node>;

inline Var make_var(Tensor value, bool requires_grad = false, std::string name = {}) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->name = std::move(name);
  return node;
}

/// Ordered record of executed differentiable operations.
class Tape {
 public:
  using BackwardFn = std::function<void(const Node& out)>;

  void record(const Var& out, std::vector<Var> inputs, BackwardFn fn) {
    out->requires_grad = true;
    ops_.push_back(Op{out, std::move(inputs), std::move(fn)});
  }

  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  bool contains(const Node* node) const {
    return std::any_of(ops_.begin(), ops_.end(), [&](const Op& op) { return op.output.get() == node; });
  }

  /// Propagates d(loss)/d(x) to every recorded input. Gradients of leaf
  /// variables accumulate across calls; intermediate buffers are reset.
  void backward(const Var& loss) {
    if (loss->value.numel() != 1) {
      throw DimensionError("backward needs a scalar loss, got " + shape_str(loss->value.shape()));
    }
    std::size_t end = ops_.size();
    while (end > 0 && ops_[end - 1].output != loss) --end;
    if (end == 0) throw GraphError("loss was not produced on this tape");
    for (std::size_t i = 0; i < end; ++i) {
      ops_[i].output->ensure_grad();
      ops_[i].output->zero_grad();
    }
    loss->grad[0] = 1.0f;
    for (std::size_t i = end; i-- > 0;) ops_[i].backward(*ops_[i].output);
  }

 private:
  struct Op {
    Var output;
    std::vector<Var> inputs;
    BackwardFn backward;
  };
  std::vector<Op> ops_;
};

namespace detail {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline bool wants_grad(const Tape* tape, std::initializer_list<const Var*> inputs) {
  if (tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Var* v) { return (*v)->requires_grad; });
}

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " expects a matrix, got " + shape_str(t.shape()));
}

inline std::span<float> grad_of(const Var& v) {
  v->ensure_grad();
  return v->grad;
}

inline void require_finite(std::span<const float> values, const std::string& what) {
  for (const float v : values) {
    if (!std::isfinite(v)) throw NumericError(what + ": non-finite value");
  }
}

}  // namespace detail

/// Lower clamp applied to probabilities before taking logarithms.
inline constexpr float kProbFloor = 1e-12f;

inline Var matmul(Tape* tape, const Var& a, const Var& b) {
  detail::require_matrix(a->value, "matmul");
  detail::require_matrix(b->value, "matmul");
  const std::size_t r = a->value.shape()[0], k = a->value.shape()[1], c = b->value.shape()[1];
  if (b->value.shape()[0] != k) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(a->value.shape()) + " x " +
                         shape_str(b->value.shape()));
  }
  Tensor out({r, c});
  detail::MatMap(out.values().data(), r, c).noalias() =
      detail::ConstMatMap(a->value.values().data(), r, k) * detail::ConstMatMap(b->value.values().data(), k, c);
  auto y = make_var(std::move(out));
  if (detail::wants_grad(tape, {&a, &b})) {
    tape->record(y, {a, b}, [a, b, r, k, c](const Node& out) {
      detail::ConstMatMap dy(out.grad.data(), r, c);
      if (a->requires_grad) {
        detail::MatMap(detail::grad_of(a).data(), r, k).noalias() +=
            dy * detail::ConstMatMap(b->value.values().data(), k, c).transpose();
      }
      if (b->requires_grad) {
        detail::MatMap(detail::grad_of(b).data(), k, c).noalias() +=
            detail::ConstMatMap(a->value.values().data(), r, k).transpose() * dy;
      }
    });
  }
  return y;
}

/// Adds a per-column bias vector to every row.
inline Var add_bias(Tape* tape, const Var& x, const Var& bias) {
  detail::require_matrix(x->value, "add_bias");
  const std::size_t n = x->value.rows(), c = x->value.cols();
  if (bias->value.numel() != c) throw DimensionError("add_bias: bias length does not match columns");
  Tensor out = x->value;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) += bias->value[j];
  auto y = make_var(std::move(out));
  if (detail::wants_grad(tape, {&x, &bias})) {
    tape->record(y, {x, bias}, [x, bias, n, c](const Node& out) {
      if (x->requires_grad) {
        auto g = detail::grad_of(x);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
      }
      if (bias->requires_grad) {
        auto g = detail::grad_of(bias);
        for (std::size_t j = 0; j < c; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < n; ++i) s += out.grad[i * c + j];
          g[j] += static_cast<float>(s);
        }
      }
    });
  }
  return y;
}

inline Var relu(Tape* tape, const Var& x) {
  Tensor out = x->value;
  for (float& v : out.values()) v = v > 0.0f ? v : 0.0f;
  auto y = make_var(std::move(out));
  if (detail::wants_grad(tape, {&x})) {
    tape->record(y, {x}, [x](const Node& out) {
      auto g = detail::grad_of(x);
      const auto xv = x->value.values();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] > 0.0f) g[i] += out.grad[i];
    });
  }
  return y;
}

/// Column-wise concatenation [a | b].
inline Var concat_cols(Tape* tape, const Var& a, const Var& b) {
  detail::require_matrix(a->value, "concat_cols");
  detail::require_matrix(b->value, "concat_cols");
  const std::size_t n = a->value.rows(), ca = a->value.cols(), cb = b->value.cols();
  if (b->value.rows() != n) throw DimensionError("concat_cols: row counts disagree");
  Tensor out({n, ca + cb});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(&a->value.values()[i * ca], ca, &out.values()[i * (ca + cb)]);
    std::copy_n(&b->value.values()[i * cb], cb, &out.values()[i * (ca + cb) + ca]);
  }
  auto y = make_var(std::move(out));
  if (detail::wants_grad(tape, {&a, &b})) {
    tape->record(y, {a, b}, [a, b, n, ca, cb](const Node& out) {
      const std::size_t w = ca + cb;
      if (a->requires_grad) {
        auto g = detail::grad_of(a);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < ca; ++j) g[i * ca + j] += out.grad[i * w + j];
      }
      if (b->requires_grad) {
        auto g = detail::grad_of(b);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < cb; ++j) g[i * cb + j] += out.grad[i * w + ca + j];
      }
    });
  }
  return y;
}

/// Row i of the output is the mean of the rows of x listed in
/// neighbors[i*k .. i*k+k).
inline Var neighbor_mean(Tape* tape, const Var& x, std::span<const std::uint32_t> neighbors, std::size_t k) {
  detail::require_matrix(x->value, "neighbor_mean");
  const std::size_t n = x->value.rows(), c = x->value.cols();
  if (k == 0 || neighbors.size() != n * k) throw DimensionError("neighbor_mean: neighbor table does not match rows");
  Tensor out({n, c});
  const float inv_k = 1.0f / static_cast<float>(k);
  const auto xv = x->value.values();
  for (std::size_t i = 0; i < n; ++i) {
    float* row = &out.values()[i * c];
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t src = neighbors[i * k + j];
      if (src >= n) throw DimensionError("neighbor_mean: neighbor index out of range");
      const float* in = &xv[src * c];
      for (std::size_t ch = 0; ch < c; ++ch) row[ch] += in[ch];
    }
    for (std::size_t ch = 0; ch < c; ++ch) row[ch] *= inv_k;
  }
  auto y = make_var(std::move(out));
  if (detail::wants_grad(tape, {&x})) {
    std::vector<std::uint32_t> table(neighbors.begin(), neighbors.end());
    tape->record(y, {x}, [x, table = std::move(table), n, c, k, inv_k](const Node& out) {
      auto g = detail::grad_of(x);
      for (std::size_t i = 0; i < n; ++i) {
        const float* dy = &out.grad[i * c];
        for (std::size_t j = 0; j < k; ++j) {
          float* dst = &g[table[i * k + j] * c];
          for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += dy[ch] * inv_k;
        }
      }
    });
  }
  return y;
}

enum class BnMode { RunningStats, InstanceStats };

struct BatchNormState {
  Var gamma;
  Var beta;
  std::vector<float> running_mu;
  std::vector<float> running_sigma2;
  float epsilon = 1e-5f;
  BnMode mode = BnMode::RunningStats;

  std::size_t channels() const { return running_mu.size(); }
};

inline BatchNormState make_batch_norm_state(std::size_t channels, std::string name = {}) {
  BatchNormState st;
  st.gamma = make_var(Tensor({channels}, 1.0f), true, name + ".gamma");
  st.beta = make_var(Tensor({channels}, 0.0f), true, name + ".beta");
  st.running_mu.assign(channels, 0.0f);
  st.running_sigma2.assign(channels, 1.0f);
  return st;
}

inline void validate(const BatchNormState& st) {
  const std::size_t c = st.running_mu.size();
  if (st.running_sigma2.size() != c || st.gamma->value.numel() != c || st.beta->value.numel() != c) {
    throw DimensionError("batch norm state fields have inconsistent lengths");
  }
  if (!(st.epsilon > 0.0f)) throw ContractError("batch norm epsilon must be positive");
}

/// Per-channel mean and biased variance of x over its rows.
inline std::pair<std::vector<double>, std::vector<double>> column_moments(const Tensor& x) {
  const std::size_t n = x.rows(), c = x.cols();
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) mean[j] += x(i, j);
  for (auto& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = x(i, j) - mean[j];
      var[j] += d * d;
    }
  for (auto& v : var) v /= static_cast<double>(n);
  return {std::move(mean), std::move(var)};
}

/// y = gamma * (x - mu) / sqrt(sigma2 + eps) + beta, with (mu, sigma2) taken
/// from the stored running values or from x itself depending on mode.
inline Var batch_norm(Tape* tape, const Var& x, const BatchNormState& st, BnMode mode) {
  detail::require_matrix(x->value, "batch_norm");
  validate(st);
  const std::size_t n = x->value.rows(), c = x->value.cols();
  if (c != st.channels()) {
    throw DimensionError("batch_norm: input has " + std::to_string(c) + " channels, state has " +
                         std::to_string(st.channels()));
  }
  std::vector<double> mu(c), inv_std(c);
  if (mode == BnMode::InstanceStats) {
    if (n == 0) throw DegenerateBatchError("batch_norm: instance statistics over zero rows");
    auto [mean, var] = column_moments(x->value);
    for (std::size_t j = 0; j < c; ++j) {
      mu[j] = mean[j];
      inv_std[j] = 1.0 / std::sqrt(var[j] + st.epsilon);
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mu[j] = st.running_mu[j];
      inv_std[j] = 1.0 / std::sqrt(static_cast<double>(st.running_sigma2[j]) + st.epsilon);
    }
  }
  Tensor xhat({n, c});
  Tensor out({n, c});
  const auto gamma = st.gamma->value.values();
  const auto beta = st.beta->value.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const float h = static_cast<float>((x->value(i, j) - mu[j]) * inv_std[j]);
      xhat(i, j) = h;
      out(i, j) = gamma[j] * h + beta[j];
    }
  auto y = make_var(std::move(out));
  const Var& g_var = st.gamma;
  const Var& b_var = st.beta;
  if (detail::wants_grad(tape, {&x, &g_var, &b_var})) {
    tape->record(y, {x, g_var, b_var},
                 [x, g_var, b_var, xhat = std::move(xhat), inv_std, n, c, mode](const Node& out) {
                   const auto gamma = g_var->value.values();
                   std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
                   for (std::size_t i = 0; i < n; ++i)
                     for (std::size_t j = 0; j < c; ++j) {
                       const double dy = out.grad[i * c + j];
                       sum_dy[j] += dy;
                       sum_dy_xhat[j] += dy * xhat(i, j);
                     }
                   if (g_var->requires_grad) {
                     auto g = detail::grad_of(g_var);
                     for (std::size_t j = 0; j < c; ++j) g[j] += static_cast<float>(sum_dy_xhat[j]);
                   }
                   if (b_var->requires_grad) {
                     auto g = detail::grad_of(b_var);
                     for (std::size_t j = 0; j < c; ++j) g[j] += static_cast<float>(sum_dy[j]);
                   }
                   if (!x->requires_grad) return;
                   auto gx = detail::grad_of(x);
                   if (mode == BnMode::RunningStats) {
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < c; ++j)
                         gx[i * c + j] += static_cast<float>(out.grad[i * c + j] * gamma[j] * inv_std[j]);
                     return;
                   }
                   const double inv_n = 1.0 / static_cast<double>(n);
                   for (std::size_t i = 0; i < n; ++i)
                     for (std::size_t j = 0; j < c; ++j) {
                       const double dy = out.grad[i * c + j];
                       const double dx = gamma[j] * inv_std[j] *
                                         (dy - inv_n * sum_dy[j] - xhat(i, j) * inv_n * sum_dy_xhat[j]);
                       gx[i * c + j] += static_cast<float>(dx);
                     }
                 });
  }
  return y;
}

inline Var batch_norm(Tape* tape, const Var& x, const BatchNormState& st) { return batch_norm(tape, x, st, st.mode); }

/// Exponential moving average of the running statistics toward the batch
/// statistics of x: running <- momentum * running + (1 - momentum) * batch.
inline void update_running_stats(BatchNormState& st, const Tensor& x, float momentum) {
  if (x.rank() != 2 || x.cols() != st.channels()) throw DimensionError("update_running_stats: channel mismatch");
  if (x.rows() == 0) throw DegenerateBatchError("update_running_stats: zero rows");
  auto [mean, var] = column_moments(x);
  for (std::size_t j = 0; j < st.channels(); ++j) {
    st.running_mu[j] = static_cast<float>(momentum * st.running_mu[j] + (1.0 - momentum) * mean[j]);
    st.running_sigma2[j] = static_cast<float>(momentum * st.running_sigma2[j] + (1.0 - momentum) * var[j]);
  }
}

/// Row-wise softmax, stabilized by subtracting the row maximum.
inline Var softmax(Tape* tape, const Var& logits) {
  detail::require_matrix(logits->value, "softmax");
  const std::size_t n = logits->value.rows(), m = logits->value.cols();
  if (m < 2) throw DimensionError("softmax needs at least two classes");
  detail::require_finite(logits->value.values(), "softmax input");
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    const float* z = &logits->value.values()[i * m];
    float* p = &out.values()[i * m];
    const float zmax = *std::max_element(z, z + m);
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) total += std::exp(static_cast<double>(z[j]) - zmax);
    for (std::size_t j = 0; j < m; ++j) p[j] = static_cast<float>(std::exp(static_cast<double>(z[j]) - zmax) / total);
  }
  auto y = make_var(std::move(out));
  if (detail::wants_grad(tape, {&logits})) {
    tape->record(y, {logits}, [logits, n, m](const Node& out) {
      auto g = detail::grad_of(logits);
      const auto p = out.value.values();
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) dot += static_cast<double>(out.grad[i * m + j]) * p[i * m + j];
        for (std::size_t j = 0; j < m; ++j)
          g[i * m + j] += static_cast<float>(p[i * m + j] * (out.grad[i * m + j] - dot));
      }
    });
  }
  return y;
}

namespace detail {

inline void require_probability_rows(const Tensor& p, const char* what) {
  require_matrix(p, what);
  const std::size_t n = p.rows(), m = p.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += p(i, j);
    if (!(std::abs(s - 1.0) <= 1e-3)) {
      throw ContractError(std::string(what) + ": row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }
}

/// p * log(p) with 0 log 0 = 0 and p clamped below at kProbFloor.
inline double plogp(float p) { return p <= 0.0f ? 0.0 : p * std::log(static_cast<double>(std::max(p, kProbFloor))); }

}  // namespace detail

/// Per-row Shannon entropy -sum_m p log p in nats; output shape [N].
inline Var row_entropy(Tape* tape, const Var& probs) {
  detail::require_probability_rows(probs->value, "row_entropy");
  const std::size_t n = probs->value.rows(), m = probs->value.cols();
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double h = 0.0;
    for (std::size_t j = 0; j < m; ++j) h -= detail::plogp(probs->value(i, j));
    out[i] = static_cast<float>(h);
  }
  auto y = make_var(std::move(out));
  if (detail::wants_grad(tape, {&probs})) {
    tape->record(y, {probs}, [probs, n, m](const Node& out) {
      auto g = detail::grad_of(probs);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double p = std::max(probs->value(i, j), kProbFloor);
          g[i * m + j] += static_cast<float>(-out.grad[i] * (std::log(p) + 1.0));
        }
    });
  }
  return y;
}

enum class Reduction {
  Sum,       ///< raw sum over selected rows
  MeanRows,  ///< sum divided by the total row count N
  MeanMask,  ///< sum divided by the number of selected rows
};

/// -sum_{i in mask} sum_m target(i,m) log p(i,m), reduced as requested.
/// mask entries must be 0 or 1 and at least one must be 1.
inline Var masked_weighted_cross_entropy(Tape* tape, const Var& probs, const Tensor& targets,
                                         std::span<const float> mask, Reduction reduction) {
  detail::require_matrix(probs->value, "cross_entropy");
  const std::size_t n = probs->value.rows(), m = probs->value.cols();
  if (targets.shape() != probs->value.shape()) throw DimensionError("cross_entropy: target shape mismatch");
  if (mask.size() != n) throw DimensionError("cross_entropy: mask length mismatch");
  std::size_t support = 0;
  for (const float w : mask) {
    if (w != 0.0f && w != 1.0f) throw ContractError("cross_entropy: mask entries must be 0 or 1");
    support += w == 1.0f;
  }
  if (support == 0) throw EmptySupportError("cross_entropy: mask selects no rows");
  double scale = 1.0;
  if (reduction == Reduction::MeanRows) scale = 1.0 / static_cast<double>(n);
  if (reduction == Reduction::MeanMask) scale = 1.0 / static_cast<double>(support);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i] == 0.0f) continue;
    for (std::size_t j = 0; j < m; ++j) {
      const float t = targets(i, j);
      if (t != 0.0f) total -= t * std::log(static_cast<double>(std::max(probs->value(i, j), kProbFloor)));
    }
  }
  auto y = make_var(Tensor::scalar(static_cast<float>(total * scale)));
  if (detail::wants_grad(tape, {&probs})) {
    std::vector<float> mask_copy(mask.begin(), mask.end());
    tape->record(y, {probs}, [probs, targets, mask_copy = std::move(mask_copy), scale, n, m](const Node& out) {
      auto g = detail::grad_of(probs);
      const double upstream = out.grad[0] * scale;
      for (std::size_t i = 0; i < n; ++i) {
        if (mask_copy[i] == 0.0f) continue;
        for (std::size_t j = 0; j < m; ++j) {
          const float t = targets(i, j);
          if (t != 0.0f)
            g[i * m + j] += static_cast<float>(-upstream * t / std::max(probs->value(i, j), kProbFloor));
        }
      }
    });
  }
  return y;
}

/// scale * sum_i weights[i] * v[i] for a vector v.
inline Var weighted_sum(Tape* tape, const Var& v, std::span<const float> weights, double scale = 1.0) {
  if (weights.size() != v->value.numel()) throw DimensionError("weighted_sum: weight length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) total += static_cast<double>(weights[i]) * v->value[i];
  auto y = make_var(Tensor::scalar(static_cast<float>(total * scale)));
  if (detail::wants_grad(tape, {&v})) {
    std::vector<float> w(weights.begin(), weights.end());
    tape->record(y, {v}, [v, w = std::move(w), scale](const Node& out) {
      auto g = detail::grad_of(v);
      const double upstream = out.grad[0] * scale;
      for (std::size_t i = 0; i < w.size(); ++i) g[i] += static_cast<float>(upstream * w[i]);
    });
  }
  return y;
}

inline Var sum(Tape* tape, const Var& x) {
  double total = 0.0;
  for (const float v : x->value.values()) total += v;
  auto y = make_var(Tensor::scalar(static_cast<float>(total)));
  if (detail::wants_grad(tape, {&x})) {
    tape->record(y, {x}, [x](const Node& out) {
      auto g = detail::grad_of(x);
      for (float& gi : g) gi += out.grad[0];
    });
  }
  return y;
}

/// a + factor * b for same-shape tensors.
inline Var add_scaled(Tape* tape, const Var& a, const Var& b, float factor = 1.0f) {
  if (a->value.shape() != b->value.shape()) throw DimensionError("add_scaled: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += factor * b->value[i];
  auto y = make_var(std::move(out));
  if (detail::wants_grad(tape, {&a, &b})) {
    tape->record(y, {a, b}, [a, b, factor](const Node& out) {
      if (a->requires_grad) {
        auto g = detail::grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
      }
      if (b->requires_grad) {
        auto g = detail::grad_of(b);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * out.grad[i];
      }
    });
  }
  return y;
}

inline Var scale(Tape* tape, const Var& x, float factor) {
  Tensor out = x->value;
  for (float& v : out.values()) v *= factor;
  auto y = make_var(std::move(out));
  if (detail::wants_grad(tape, {&x})) {
    tape->record(y, {x}, [x, factor](const Node& out) {
      auto g = detail::grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * out.grad[i];
    });
  }
  return y;
}

/// One-hot encoding of integer labels into an N x M tensor.
inline Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
  Tensor t({labels.size(), num_classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
      throw ContractError("one_hot: label " + std::to_string(labels[i]) + " out of range");
    t(i, static_cast<std::size_t>(labels[i])) = 1.0f;
  }
  return t;
}

}  // namespace ipcs
