#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fedsp/tensor.hpp"

namespace fedsp {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled-weight-decay Adam over a fixed parameter group.
///
/// Parameters whose `requires_grad` is off are skipped entirely, so frozen
/// tensors stay bitwise unchanged no matter how many steps run.
class AdamW {
 public:
  explicit AdamW(std::vector<Tensor> params, AdamWOptions options = {});

  /// Applies one update at learning rate `lr` and zeroes the gradients.
  /// Throws if a trainable parameter has no gradient.
  void step(double lr);

  std::int64_t step_count() const noexcept { return step_; }
  const std::vector<Tensor>& params() const noexcept { return params_; }
  const AdamWOptions& options() const noexcept { return options_; }
  std::span<const double> first_moment(std::size_t i) const { return m_.at(i); }
  std::span<const double> second_moment(std::size_t i) const { return v_.at(i); }

 private:
  std::vector<Tensor> params_;
  AdamWOptions options_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::int64_t step_ = 0;
};

/// Linear warm-up followed by linear decay to zero.
///
/// With W = ceil(warmup_fraction * total_steps):
///   lr(s) = base * (s + 1) / W                 for s < W
///   lr(s) = base * (total - s) / (total - W)   for W <= s <= total
class LinearWarmupDecay {
 public:
  LinearWarmupDecay(double base_lr, std::size_t total_steps, double warmup_fraction = 0.1);

  double lr(std::size_t step) const;
  double base_lr() const noexcept { return base_lr_; }
  std::size_t total_steps() const noexcept { return total_steps_; }
  std::size_t warmup_steps() const noexcept { return warmup_steps_; }

 private:
  double base_lr_;
  std::size_t total_steps_;
  std::size_t warmup_steps_;
};

}  // namespace fedsp
