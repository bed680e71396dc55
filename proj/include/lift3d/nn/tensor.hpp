#pragma once

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace lift3d::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A node in the reverse-mode tape. Leaves (parameters, constants) have no
/// inputs; interior nodes capture their inputs and a closure that pushes the
/// node's gradient back into them.
struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Matrix& g);
};

/// Handle to a tape node with value semantics on the handle (copies alias the
/// same node). Gradients are tracked only through nodes that require them.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor zeros(Eigen::Index rows, Eigen::Index cols, bool requires_grad = false);
  static Tensor constant(const Matrix& value) { return Tensor(value, false); }

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  /// Mutable access for optimizers and checkpoint loading; never call on a
  /// node that is part of a live graph.
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const { return node_->value(0, 0); }

  /// Backpropagates from a 1x1 tensor.
  void backward() const;

  /// Deep copy of the value into a fresh leaf.
  Tensor detach_copy(bool requires_grad) const { return Tensor(node_->value, requires_grad); }

  const std::shared_ptr<Node>& node() const { return node_; }

  static Tensor make(Matrix value, std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn);

 private:
  std::shared_ptr<Node> node_;
};

// Shape-preserving arithmetic.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_row(const Tensor& a, const Tensor& row);

// Products and layout.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& a, std::span<const int> index);

// Nonlinearities.
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
/// log(sigmoid(a)), computed without overflow.
Tensor log_sigmoid(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// Reductions.
Tensor mean_rows(const Tensor& a);
/// Max over consecutive blocks of `group` rows: (M*group)xC -> MxC.
Tensor group_max(const Tensor& a, Eigen::Index group);
Tensor sum_all(const Tensor& a);
/// mean |a - b| over all entries.
Tensor mean_abs_diff(const Tensor& a, const Tensor& b);
/// mean |a - b| over entries where mask != 0. Throws if no entry is selected.
Tensor masked_mean_abs_diff(const Tensor& a, const Matrix& target, const Matrix& mask);

// Layers.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
/// x W + b + s (x A) B. The low-rank path is skipped in the forward value while
/// B is exactly zero so the result matches the plain linear map bit for bit;
/// gradients for A and B are still produced.
Tensor lora_linear(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& down,
                   const Tensor& up, double s);

}  // namespace lift3d::nn
