#pragma once

#include "gst/nn/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace gst::nn {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// Decoupled-weight-decay Adam. Moments are kept in parameter order.
template <typename T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(ParamList<T> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto* p : params_) {
      m_.emplace_back(p->size(), T(0));
      v_.emplace_back(p->size(), T(0));
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      auto& m = m_[i];
      auto& v = v_[i];
      const T decay = p.decay ? T(1.0 - lr * cfg_.weight_decay) : T(1);
      for (std::size_t j = 0; j < p.size(); ++j) {
        const T g = p.grad[j];
        m[j] = T(cfg_.beta1) * m[j] + T(1.0 - cfg_.beta1) * g;
        v[j] = T(cfg_.beta2) * v[j] + T(1.0 - cfg_.beta2) * g * g;
        const T mhat = m[j] / T(bc1);
        const T vhat = v[j] / T(bc2);
        p.value[j] = p.value[j] * decay - T(lr) * mhat / (std::sqrt(vhat) + T(cfg_.eps));
      }
    }
  }

  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const ParamList<T>& params() const { return params_; }

 private:
  ParamList<T> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::int64_t t_ = 0;
};

/// Scales gradients so their global norm is at most max_norm. Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(const ParamList<T>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0) {
    const T scale = T(max_norm / norm);
    for (auto* p : params)
      for (auto& g : p->grad) g *= scale;
  }
  return norm;
}

/// Constant base rate dropping once to the final rate at a fraction of training.
struct StepDecaySchedule {
  double base_lr = 1e-4;
  double final_lr = 1e-5;
  double drop_fraction = 0.8;
  int warmup_steps = 0;

  double at(std::int64_t step, std::int64_t total) const {
    if (warmup_steps > 0 && step < warmup_steps) return base_lr * double(step + 1) / double(warmup_steps);
    return double(step) < drop_fraction * double(total) ? base_lr : final_lr;
  }
};

}  // namespace gst::nn
