#include "fedsp/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace fedsp {

AdamW::AdamW(std::vector<Tensor> params, AdamWOptions options) : params_(std::move(params)), options_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& p = params_[i];
    if (p.requires_grad() && p.grad().size() != p.numel()) {
      throw std::logic_error("adamw: parameter '" + (p.name().empty() ? "#" + std::to_string(i) : p.name()) +
                             "' has no gradient");
    }
  }
  ++step_;
  const double b1 = options_.beta1;
  const double b2 = options_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double decay = 1.0 - lr * options_.weight_decay;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& p = params_[i];
    if (!p.requires_grad()) continue;
    auto w = p.mutable_data();
    auto g = p.mutable_grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      w[j] = w[j] * decay - lr * m_hat / (std::sqrt(v_hat) + options_.eps);
      g[j] = 0.0;
    }
  }
}

LinearWarmupDecay::LinearWarmupDecay(double base_lr, std::size_t total_steps, double warmup_fraction)
    : base_lr_(base_lr), total_steps_(total_steps) {
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0) {
    throw std::invalid_argument("warmup fraction must lie in [0, 1]");
  }
  warmup_steps_ = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
}

double LinearWarmupDecay::lr(std::size_t step) const {
  if (step >= total_steps_) return 0.0;
  if (step < warmup_steps_) {
    return base_lr_ * static_cast<double>(step + 1) / static_cast<double>(warmup_steps_);
  }
  return base_lr_ * static_cast<double>(total_steps_ - step) / static_cast<double>(total_steps_ - warmup_steps_);
}

}  // namespace fedsp
