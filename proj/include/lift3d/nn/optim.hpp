#pragma once

#include "lift3d/nn/tensor.hpp"

#include <string>
#include <vector>

namespace lift3d::nn {

/// Ordered list of named parameters. Order is the checkpoint order and the
/// optimizer state order, so it must be stable across runs.
struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

enum class Schedule { kConstant, kCosineWarmup };

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Schedule schedule = Schedule::kConstant;
  double warmup_fraction = 0.1;
  long total_steps = 1;
};

/// Learning rate at `step` (0-based) under the configured schedule.
double scheduled_lr(const AdamOptions& opt, long step);

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options);

  /// Applies one update using the accumulated gradients, then clears them.
  /// Parameters without a gradient this step are left untouched.
  void step();
  void zero_grad();

  long steps_taken() const { return t_; }
  double current_lr() const { return scheduled_lr(options_, t_); }

 private:
  std::vector<Tensor> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  AdamOptions options_;
  long t_ = 0;
};

}  // namespace lift3d::nn
