/**
 * @file tensor.hpp
 * @brief Dense 64-bit tensors with reverse-mode automatic differentiation.
 *
 * A Tensor is a shared handle to a node holding row-major values, an
 * optional gradient buffer and, for op results, the closure that pushes the
 * node's gradient into its inputs. Ops record themselves only when at least
 * one input requires a gradient, so inference builds no tape.
 */

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace poly::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  /// Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double item() const;
  double operator[](std::size_t k) const { return node_->value[k]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  /// Empty span until a backward pass reaches this tensor.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  /// Reverse pass from a scalar. Leaf gradients accumulate across calls;
  /// intermediate gradients are reset first. Throws NotScalar.
  void backward() const;

  /// Value copy without history.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

/// While alive, ops on this thread record no history (inference, finite differences).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// --- elementwise ---------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
/// Gradient is zero where the input was clipped.
Tensor clamp(const Tensor& x, double lo, double hi);

// --- reductions ----------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// --- shape ---------------------------------------------------------------
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

// --- linear algebra ------------------------------------------------------
/// [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[m,k] W[k,n] + b[n].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
/// Adds a length-n vector to every row of an [m,n] tensor.
Tensor add_row(const Tensor& x, const Tensor& row);

// --- indexing ------------------------------------------------------------
/// Rows of table[V,d] at the given indices -> [n,d]. Also serves as embedding lookup.
Tensor embed(const Tensor& table, std::span<const int> indices);
Tensor gather_rows(const Tensor& x, std::span<const int> indices);
/// out[index[r]] += x[r]; out has n_out rows.
Tensor scatter_add_rows(const Tensor& x, std::span<const int> index, std::size_t n_out);
/// Multiplies row r by the constant weights[r].
Tensor scale_rows(const Tensor& x, std::span<const double> weights);

// --- nonlinear layers ----------------------------------------------------
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x);  // last axis

/// x[B,C,H,W], kernel[O,C,kh,kw], bias[O].
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride = 1, int pad = 0);
/// Non-overlapping window x window max pooling.
Tensor maxpool2d(const Tensor& x, int window);
Tensor upsample_nearest(const Tensor& x, int factor);

/// Running statistics for batch normalization over axis 1.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

/// Normalizes per channel (axis 1) of [N,C] or [N,C,H,W]. Training mode uses
/// biased batch statistics and updates the running estimates (unbiased
/// variance); eval mode uses the running estimates.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, bool training);

// --- fused losses ----------------------------------------------------------
/// -sum_r weight[r] * log softmax(logits[r])[target[r]] over [R,C] logits.
Tensor cross_entropy_sum(const Tensor& logits, std::span<const int> targets, std::span<const double> weights = {});
/// -sum [y log sigmoid(l) + (1-y) log(1 - sigmoid(l))].
Tensor bce_with_logits_sum(const Tensor& logits, std::span<const double> targets);

// --- gradient checking -----------------------------------------------------
/// max_k |g_ad - g_fd| / max(1, |g_fd|) for scalar f at x, central differences.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-4);

/// Same measure over every component of each tensor in `inputs`, which must
/// require gradients; `loss` rebuilds the scalar from their current values.
/// `max_per_tensor` > 0 checks that many evenly spaced components per tensor.
double grad_check_many(const std::function<Tensor()>& loss, std::vector<Tensor> inputs, double eps = 1e-4,
                       std::size_t max_per_tensor = 0);

}  // namespace poly::ad
