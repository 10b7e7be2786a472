// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>
#include <vector>

namespace difflab {

/// Adaptive-moment optimizer with decoupled weight decay over a flat vector.
class AdamW {
 public:
  struct Config {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int warmup = 0;
  };

  AdamW() = default;
  AdamW(std::size_t size, Config cfg) : cfg_(cfg), m_(size, 0.0), v_(size, 0.0) {}

  const Config& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  long steps() const { return step_; }
  std::span<const double> first_moment() const { return m_; }
  std::span<const double> second_moment() const { return v_; }

  /// Learning rate after linear warmup.
  double current_lr() const {
    if (cfg_.warmup <= 0) return cfg_.lr;
    return cfg_.lr * std::min(1.0, static_cast<double>(step_) / cfg_.warmup);
  }

  void step(std::span<double> params, std::span<const double> grad) {
    ++step_;
    const double lr = current_lr();
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      if (lr == 0.0) continue;
      const double update = (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.eps);
      params[i] -= lr * (update + cfg_.weight_decay * params[i]);
    }
  }

 private:
  Config cfg_;
  std::vector<double> m_, v_;
  long step_ = 0;
};

}  // namespace difflab
