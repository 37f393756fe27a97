#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "checkpoint.hpp"

namespace ddlm {

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double min_lr_fraction = 0.1;
  std::uint64_t warmup_steps = 50;
  double beta = 0.999;
  double eps = 1e-8;
};

// Linear warmup then cosine decay to min_lr_fraction * lr.
inline double lr_at(const OptimizerConfig& c, std::uint64_t step, std::uint64_t total) {
  if (c.warmup_steps > 0 && step < c.warmup_steps) {
    return c.learning_rate * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  }
  const double span = total > c.warmup_steps ? static_cast<double>(total - c.warmup_steps) : 1.0;
  const double progress = std::min(1.0, static_cast<double>(step - c.warmup_steps) / span);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return c.learning_rate * (c.min_lr_fraction + (1.0 - c.min_lr_fraction) * cosine);
}

// Momentum-free adaptive step: each coordinate is divided by a running RMS
// of its own gradient (bias corrected).
class RmsOptimizer {
 public:
  RmsOptimizer(OptimizerConfig cfg, std::size_t n) : cfg_(cfg) { state_.second_moment.assign(n, 0.0f); }
  RmsOptimizer(OptimizerConfig cfg, OptimizerState state) : cfg_(cfg), state_(std::move(state)) {}

  void step(std::span<float> params, std::span<const float> grad, double lr) {
    ++state_.step;
    const double beta = cfg_.beta;
    const double correction = 1.0 - std::pow(beta, static_cast<double>(state_.step));
    auto& v = state_.second_moment;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const float g = grad[i];
      v[i] = static_cast<float>(beta * v[i] + (1.0 - beta) * static_cast<double>(g) * g);
      const double denom = std::sqrt(v[i] / correction) + cfg_.eps;
      params[i] -= static_cast<float>(lr * g / denom);
    }
  }

  const OptimizerState& state() const { return state_; }
  std::uint64_t steps_taken() const { return state_.step; }

 private:
  OptimizerConfig cfg_;
  OptimizerState state_;
};

}  // namespace ddlm
