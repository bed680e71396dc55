#include "lift3d/nn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace lift3d::nn {

double scheduled_lr(const AdamOptions& opt, long step) {
  if (opt.schedule == Schedule::kConstant) return opt.lr;
  const double total = static_cast<double>(std::max<long>(opt.total_steps, 1));
  const double warm = std::max(1.0, std::floor(opt.warmup_fraction * total));
  const double t = static_cast<double>(step);
  if (t < warm) return opt.lr * (t + 1.0) / warm;
  const double progress = std::clamp((t - warm) / std::max(1.0, total - warm), 0.0, 1.0);
  return opt.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Adam::Adam(std::vector<Tensor> params, AdamOptions options) : params_(std::move(params)), options_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void Adam::step() {
  const double lr = scheduled_lr(options_, t_);
  ++t_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    const Matrix& g = p.grad();
    m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * g;
    v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * g.cwiseProduct(g);
    const auto mhat = (m_[i] / c1).array();
    const auto vhat = (v_[i] / c2).array();
    p.mutable_value().array() -= lr * mhat / (vhat.sqrt() + options_.eps);
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace lift3d::nn
