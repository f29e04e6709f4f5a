#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "repkan/error.hpp"
#include "repkan/tensor.hpp"

namespace repkan {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

struct Moments {
  Tensor m;
  Tensor v;
};

/// One AdamW update of a single tensor. `step` is the 1-based step count after this update.
/// Decay is decoupled: param *= 1 - lr * wd, then the bias-corrected Adam step.
inline void adamw_update(Tensor& param, const Tensor& grad, Moments& mom, long step, double lr, const AdamWConfig& cfg) {
  param.require_same_shape(grad, "adamw grad");
  param.require_same_shape(mom.m, "adamw first moment");
  param.require_same_shape(mom.v, "adamw second moment");
  if (!(lr >= 0.0)) throw InputError("learning rate must be non-negative");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
    mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = mom.m[i] / bc1;
    const double vhat = mom.v[i] / bc2;
    param[i] = param[i] * decay - lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

/// AdamW over a fixed, ordered list of parameters.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const noexcept { return cfg_; }
  long steps() const noexcept { return step_; }
  const std::vector<Moments>& moments() const noexcept { return moments_; }

  void step(const std::vector<GradPair*>& params, double lr) {
    if (moments_.empty()) {
      for (const GradPair* p : params) moments_.push_back({Tensor::zeros_like(p->value), Tensor::zeros_like(p->value)});
    }
    if (moments_.size() != params.size()) {
      throw DimensionError("optimizer holds " + std::to_string(moments_.size()) + " moment pairs, got " +
                           std::to_string(params.size()) + " parameters");
    }
    ++step_;
    for (std::size_t i = 0; i < params.size(); ++i) adamw_update(params[i]->value, params[i]->grad, moments_[i], step_, lr, cfg_);
  }

 private:
  AdamWConfig cfg_;
  long step_ = 0;
  std::vector<Moments> moments_;
};

/// Per-epoch learning rate: linear warmup, then cosine annealing to min_lr.
struct Schedule {
  double base_lr = 5e-4;
  int warmup_epochs = 5;
  int total_epochs = 50;
  double min_lr = 1e-6;

  void validate() const {
    if (total_epochs < 0) throw ConfigError("epochs must be non-negative");
    if (warmup_epochs < 0 || (total_epochs > 0 && warmup_epochs >= total_epochs)) {
      throw ConfigError("warmup_epochs must lie in [0, epochs), got " + std::to_string(warmup_epochs));
    }
    if (!(base_lr >= 0.0) || !(min_lr >= 0.0) || min_lr > base_lr) {
      throw ConfigError("need 0 <= min_lr <= lr");
    }
  }
};

inline double lr_at(const Schedule& s, int epoch) {
  if (epoch < 0 || epoch >= s.total_epochs) {
    throw InputError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(s.total_epochs) + ")");
  }
  if (epoch < s.warmup_epochs) return s.base_lr * static_cast<double>(epoch + 1) / static_cast<double>(s.warmup_epochs);
  const int span = s.total_epochs - s.warmup_epochs - 1;
  if (epoch == s.warmup_epochs || span == 0) return s.base_lr;
  if (epoch == s.total_epochs - 1) return s.min_lr;
  const double progress = static_cast<double>(epoch - s.warmup_epochs) / static_cast<double>(span);
  return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace repkan
