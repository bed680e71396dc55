#include "lift3d/nn/tensor.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

namespace lift3d::nn {

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Eigen::Index rows, Eigen::Index cols, bool requires_grad) {
  return Tensor(Matrix::Zero(rows, cols), requires_grad);
}

Tensor Tensor::make(Matrix value, std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn) {
  Tensor out(std::move(value), false);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    out.node_->requires_grad = true;
    out.node_->inputs.reserve(inputs.size());
    for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
    out.node_->backward_fn = std::move(backward_fn);
  }
  return out;
}

void Tensor::backward() const {
  if (rows() != 1 || cols() != 1) throw std::invalid_argument("backward() needs a 1x1 tensor");
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a topological order of the tape.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
  // Interior gradients are no longer needed; leaves keep theirs.
  for (Node* n : order) {
    if (n->backward_fn) n->grad.resize(0, 0);
  }
}

namespace {

void push(const std::shared_ptr<Node>& n, const Matrix& g) {
  if (n->requires_grad) n->accumulate(g);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return Tensor::make(a.value() + b.value(), {a, b}, [](Node& n) {
    push(n.inputs[0], n.grad);
    push(n.inputs[1], n.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return Tensor::make(a.value() - b.value(), {a, b}, [](Node& n) {
    push(n.inputs[0], n.grad);
    push(n.inputs[1], -n.grad);
  });
}

Tensor scale(const Tensor& a, double s) {
  return Tensor::make(a.value() * s, {a}, [s](Node& n) { push(n.inputs[0], n.grad * s); });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return Tensor::make(std::move(out), {a, row}, [](Node& n) {
    push(n.inputs[0], n.grad);
    push(n.inputs[1], n.grad.colwise().sum());
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix out = a.value() * b.value();
  return Tensor::make(std::move(out), {a, b}, [](Node& n) {
    const auto& A = n.inputs[0];
    const auto& B = n.inputs[1];
    if (A->requires_grad) A->accumulate(n.grad * B->value.transpose());
    if (B->requires_grad) B->accumulate(A->value.transpose() * n.grad);
  });
}

Tensor transpose(const Tensor& a) {
  Matrix out = a.value().transpose();
  return Tensor::make(std::move(out), {a}, [](Node& n) { push(n.inputs[0], n.grad.transpose()); });
}

Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.cols()) throw std::invalid_argument("slice_cols: out of range");
  Matrix out = a.value().middleCols(start, count);
  const Eigen::Index total = a.cols();
  return Tensor::make(std::move(out), {a}, [start, count, total](Node& n) {
    if (!n.inputs[0]->requires_grad) return;
    Matrix g = Matrix::Zero(n.grad.rows(), total);
    g.middleCols(start, count) = n.grad;
    n.inputs[0]->accumulate(g);
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return Tensor::make(std::move(out), parts, [](Node& n) {
    Eigen::Index c = 0;
    for (auto& in : n.inputs) {
      const auto w = in->value.cols();
      if (in->requires_grad) in->accumulate(n.grad.middleCols(c, w));
      c += w;
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return Tensor::make(std::move(out), parts, [](Node& n) {
    Eigen::Index r = 0;
    for (auto& in : n.inputs) {
      const auto h = in->value.rows();
      if (in->requires_grad) in->accumulate(n.grad.middleRows(r, h));
      r += h;
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const int> index) {
  Matrix out(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  std::vector<int> idx(index.begin(), index.end());
  return Tensor::make(std::move(out), {a}, [idx = std::move(idx)](Node& n) {
    const auto& in = n.inputs[0];
    if (!in->requires_grad) return;
    Matrix g = Matrix::Zero(in->value.rows(), in->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    in->accumulate(g);
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  const auto x = a.value().array();
  // tanh(y) = 1 - 2 / (1 + e^{2y}); Eigen vectorizes exp but not tanh.
  const Eigen::ArrayXXd y = kGeluC * (x + kGeluA * x.cube());
  const Eigen::ArrayXXd t = 1.0 - 2.0 / (1.0 + (2.0 * y).exp());
  Matrix out = (0.5 * x * (1.0 + t)).matrix();
  Matrix d = (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t.square()) * kGeluC * (1.0 + 3.0 * kGeluA * x.square())).matrix();
  return Tensor::make(std::move(out), {a}, [d = std::move(d)](Node& n) {
    n.inputs[0]->accumulate(n.grad.cwiseProduct(d));
  });
}

Tensor sigmoid(const Tensor& a) {
  Matrix out = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return Tensor::make(out, {a}, [out](Node& n) {
    n.inputs[0]->accumulate(n.grad.cwiseProduct(out.cwiseProduct((1.0 - out.array()).matrix())));
  });
}

Tensor log_sigmoid(const Tensor& a) {
  const auto x = a.value().array();
  // log sigmoid(x) = min(x, 0) - log1p(exp(-|x|))
  Matrix out = (x.min(0.0) - (-x.abs()).exp().log1p()).matrix();
  Matrix d = (1.0 / (1.0 + x.exp())).matrix();
  return Tensor::make(std::move(out), {a}, [d = std::move(d)](Node& n) {
    n.inputs[0]->accumulate(n.grad.cwiseProduct(d));
  });
}

Tensor softmax_rows(const Tensor& a) {
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return Tensor::make(out, {a}, [out](Node& n) {
    Matrix g(out.rows(), out.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const double dot = n.grad.row(r).dot(out.row(r));
      g.row(r) = out.row(r).cwiseProduct((n.grad.row(r).array() - dot).matrix());
    }
    n.inputs[0]->accumulate(g);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index cols = x.cols();
  if (gamma.cols() != cols || beta.cols() != cols) throw std::invalid_argument("layer_norm: width mismatch");
  Matrix xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = x.value().row(r).mean();
    const auto centered = (x.value().row(r).array() - mu).eval();
    const double var = centered.square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = centered * inv_std(r);
  }
  Matrix out = xhat;
  for (Eigen::Index r = 0; r < rows; ++r) {
    out.row(r) = xhat.row(r).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
  }
  return Tensor::make(std::move(out), {x, gamma, beta}, [xhat, inv_std](Node& n) {
    const auto& X = n.inputs[0];
    const auto& G = n.inputs[1];
    const auto& B = n.inputs[2];
    if (X->requires_grad) {
      Matrix gx(xhat.rows(), xhat.cols());
      for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
        const auto dxhat = n.grad.row(r).cwiseProduct(G->value.row(0)).eval();
        const double m1 = dxhat.mean();
        const double m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
        gx.row(r) = inv_std(r) * (dxhat.array() - m1 - xhat.row(r).array() * m2).matrix();
      }
      X->accumulate(gx);
    }
    if (G->requires_grad) G->accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
    if (B->requires_grad) B->accumulate(n.grad.colwise().sum());
  });
}

Tensor mean_rows(const Tensor& a) {
  const Eigen::Index rows = a.rows();
  Matrix out = a.value().colwise().mean();
  return Tensor::make(std::move(out), {a}, [rows](Node& n) {
    Matrix g = n.grad.replicate(rows, 1) / static_cast<double>(rows);
    n.inputs[0]->accumulate(g);
  });
}

Tensor group_max(const Tensor& a, Eigen::Index group) {
  if (group <= 0 || a.rows() % group != 0) throw std::invalid_argument("group_max: rows not divisible by group");
  const Eigen::Index m = a.rows() / group;
  const Eigen::Index c = a.cols();
  Matrix out(m, c);
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(m * c));
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) {
      Eigen::Index best = i * group;
      for (Eigen::Index r = i * group + 1; r < (i + 1) * group; ++r) {
        if (a.value()(r, j) > a.value()(best, j)) best = r;
      }
      out(i, j) = a.value()(best, j);
      arg[static_cast<std::size_t>(i * c + j)] = best;
    }
  }
  const Eigen::Index total = a.rows();
  return Tensor::make(std::move(out), {a}, [arg = std::move(arg), m, c, total](Node& n) {
    Matrix g = Matrix::Zero(total, c);
    for (Eigen::Index i = 0; i < m; ++i) {
      for (Eigen::Index j = 0; j < c; ++j) g(arg[static_cast<std::size_t>(i * c + j)], j) += n.grad(i, j);
    }
    n.inputs[0]->accumulate(g);
  });
}

Tensor sum_all(const Tensor& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const Eigen::Index rows = a.rows();
  const Eigen::Index cols = a.cols();
  return Tensor::make(std::move(out), {a}, [rows, cols](Node& n) {
    n.inputs[0]->accumulate(Matrix::Constant(rows, cols, n.grad(0, 0)));
  });
}

namespace {
double sign(double v) { return (v > 0.0) - (v < 0.0); }
}  // namespace

Tensor mean_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mean_abs_diff");
  if (a.value().size() == 0) throw std::invalid_argument("mean_abs_diff: empty input");
  const double count = static_cast<double>(a.value().size());
  Matrix out(1, 1);
  out(0, 0) = (a.value() - b.value()).cwiseAbs().sum() / count;
  return Tensor::make(std::move(out), {a, b}, [count](Node& n) {
    const Matrix s = (n.inputs[0]->value - n.inputs[1]->value).unaryExpr(&sign) * (n.grad(0, 0) / count);
    push(n.inputs[0], s);
    push(n.inputs[1], -s);
  });
}

Tensor masked_mean_abs_diff(const Tensor& a, const Matrix& target, const Matrix& mask) {
  if (a.rows() != target.rows() || a.cols() != target.cols() || mask.rows() != a.rows() ||
      mask.cols() != a.cols()) {
    throw std::invalid_argument("masked_mean_abs_diff: shape mismatch");
  }
  const Matrix selected = mask.unaryExpr([](double m) { return m != 0.0 ? 1.0 : 0.0; });
  const double count = selected.sum();
  if (count == 0.0) throw std::invalid_argument("masked_mean_abs_diff: no valid entries");
  Matrix out(1, 1);
  out(0, 0) = (a.value() - target).cwiseAbs().cwiseProduct(selected).sum() / count;
  return Tensor::make(std::move(out), {a}, [target, selected, count](Node& n) {
    const Matrix s =
        (n.inputs[0]->value - target).unaryExpr(&sign).cwiseProduct(selected) * (n.grad(0, 0) / count);
    n.inputs[0]->accumulate(s);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_row(matmul(x, w), b); }

Tensor lora_linear(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& down, const Tensor& up,
                   double s) {
  if (x.cols() != w.rows() || b.cols() != w.cols() || down.rows() != w.rows() || up.cols() != w.cols() ||
      down.cols() != up.rows()) {
    throw std::invalid_argument("lora_linear: shape mismatch");
  }
  Matrix out = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  const bool active = !up.value().isZero(0.0);
  Matrix hidden = x.value() * down.value();
  if (active) out.noalias() += s * (hidden * up.value());
  return Tensor::make(std::move(out), {x, w, b, down, up}, [s, hidden](Node& n) {
    const auto& X = n.inputs[0];
    const auto& W = n.inputs[1];
    const auto& B = n.inputs[2];
    const auto& A = n.inputs[3];
    const auto& U = n.inputs[4];
    const Matrix g_hidden = s * (n.grad * U->value.transpose());
    if (X->requires_grad) X->accumulate(n.grad * W->value.transpose() + g_hidden * A->value.transpose());
    if (W->requires_grad) W->accumulate(X->value.transpose() * n.grad);
    if (B->requires_grad) B->accumulate(n.grad.colwise().sum());
    if (A->requires_grad) A->accumulate(X->value.transpose() * g_hidden);
    if (U->requires_grad) U->accumulate(s * (hidden.transpose() * n.grad));
  });
}

}  // namespace lift3d::nn
