#pragma once

// Adam with a linear warm-up to a constant learning rate and optional
// global-norm gradient clipping.

#include "mscl/autograd.hpp"

#include <cmath>

namespace mscl {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int warmup_steps = 200;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

// lr at optimizer step s (1-based): base * min(1, s / warmup).
inline double warmup_lr(const AdamConfig& c, long step) {
  if (c.warmup_steps <= 0 || step >= c.warmup_steps) return c.lr;
  return c.lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
}

template <typename T>
class Adam {
 public:
  Adam(const ParamSet<T>& params, AdamConfig config) : config_(config), m_(params), v_(params) {}

  long steps() const { return step_; }
  const AdamConfig& config() const { return config_; }

  // Returns the learning rate used for this step.
  double step(ParamSet<T>& params, GradSet<T>& grads) {
    ++step_;
    if (config_.clip_norm > 0) {
      double sq = 0;
      for (ParamId i = 0; i < grads.size(); ++i) sq += static_cast<double>(grads[i].squaredNorm());
      const double norm = std::sqrt(sq);
      if (norm > config_.clip_norm) grads.scale(static_cast<T>(config_.clip_norm / norm));
    }
    const double lr = warmup_lr(config_, step_);
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
    const T a = static_cast<T>(lr / bc1);
    const T s2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(config_.eps);
    for (ParamId i = 0; i < params.size(); ++i) {
      auto& m = m_[i];
      auto& v = v_[i];
      const auto& g = grads[i];
      m = b1 * m + (T(1) - b1) * g;
      v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
      params.value(i).array() -= a * m.array() / ((v.array().sqrt() * s2) + eps);
    }
    return lr;
  }

 private:
  AdamConfig config_;
  GradSet<T> m_;
  GradSet<T> v_;
  long step_ = 0;
};

}  // namespace mscl
