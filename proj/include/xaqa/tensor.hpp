#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "xaqa/error.hpp"

namespace xaqa {

using Shape = std::vector<std::size_t>;

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first touched by backward
  bool requires_grad = false;
};
}  // namespace detail

/// Dense row-major tensor of 64-bit floats. Copies are shallow handles onto
/// the same storage; values are treated as immutable once an op has consumed
/// them, grad is the only buffer mutated after construction.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  /// 1-d tensor of length values.size().
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t numel() const { return d_->values.size(); }
  bool is_scalar() const { return numel() == 1; }
  bool is_matrix() const { return rank() == 2; }

  /// Rows/cols of a rank-2 tensor; a rank-1 tensor is viewed as one row.
  std::size_t rows() const;
  std::size_t cols() const;

  double value() const;  // scalar only
  double at(std::size_t r, std::size_t c) const { return d_->values[r * cols() + c]; }
  double operator[](std::size_t i) const { return d_->values[i]; }

  std::span<const double> values() const { return d_->values; }
  std::span<double> values_mut() { return d_->values; }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  bool has_grad() const { return d_ && !d_->grad.empty(); }
  std::span<const double> grad() const;
  /// Zero-initialized on first use.
  std::span<double> grad_mut();
  void zero_grad();

  /// True when two handles share storage.
  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

  std::shared_ptr<detail::TensorData> data_ptr() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<detail::TensorData> d_;
  friend class Graph;
};

/// Recorded computation for one forward pass. Ops append their backward
/// steps in construction order; backward() replays them in exact reverse.
/// Activate recording with a Scope; ops executed with no active graph run
/// forward-only.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  class Scope {
   public:
    explicit Scope(Graph& g) : prev_(active_) { active_ = &g; }
    ~Scope() { active_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Graph* prev_;
  };

  static Graph* active() { return active_; }

  void record(std::function<void()> backward_step) { steps_.push_back(std::move(backward_step)); }
  std::size_t size() const { return steps_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded step in reverse.
  /// Gradients accumulate additively across multiple uses of a tensor.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> steps_;
  static thread_local Graph* active_;
};

namespace ops {

/// Standard matrix product a[m×k] · b[k×n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Elementwise sum; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
/// a[m×n] + row broadcast over rows; bias has numel n.
Tensor add_rowvec(const Tensor& a, const Tensor& bias);
Tensor scale(const Tensor& a, double factor);
Tensor mul(const Tensor& a, const Tensor& b);

/// Row-wise softmax with per-row max subtraction.
Tensor softmax_rows(const Tensor& a);
/// Elementwise natural log; inputs must be positive.
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
/// Exact (erf-based) GELU.
Tensor gelu(const Tensor& a);

/// Per-row layer normalization with learned gain/bias of width cols().
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

/// Rows of `table` selected by id; duplicate ids accumulate gradient.
Tensor embedding_gather(const Tensor& table, const std::vector<int>& ids);

/// -sum_i target_i * log(probs_i + 1e-12), scalar output, differentiable
/// w.r.t. probs only. Lengths must match.
Tensor cross_entropy(const Tensor& probs, const Tensor& target);

Tensor sum(const Tensor& a);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::size_t col_begin, std::size_t col_end);
Tensor concat_cols(const std::vector<Tensor>& parts);
/// Row r of a as a 1×cols matrix; gradient scatters back into row r.
Tensor pick_row(const Tensor& a, std::size_t r);

constexpr double kCrossEntropyEps = 1e-12;

}  // namespace ops

/// Debug-build guard: throws NumericError when the tensor holds NaN/Inf.
void check_finite(const Tensor& t, const char* what);

}  // namespace xaqa
