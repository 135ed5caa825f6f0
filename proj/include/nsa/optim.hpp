#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "nsa/tensor.hpp"

namespace nsa {

/// Cosine decay from base_lr to min_lr over total_steps.
inline float cosine_lr(float base_lr, int64_t step, int64_t total_steps,
                       float min_lr = 0.0f) {
  if (total_steps <= 1) return base_lr;
  double t = double(std::min(step, total_steps - 1)) / double(total_steps - 1);
  return float(min_lr + 0.5 * (double(base_lr) - min_lr) *
                            (1.0 + std::cos(std::numbers::pi * t)));
}

inline void zero_grads(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.zero_grad();
}

/// Plain SGD step; parameters whose gradient never materialized are skipped.
inline void sgd_step(std::vector<Tensor>& params, float lr) {
  for (Tensor& p : params) {
    if (!p.has_grad()) continue;
    auto v = p.value();
    auto g = p.grad();
    for (size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
  }
}

class Adam {
 public:
  explicit Adam(float lr = 1e-4f, float beta1 = 0.9f, float beta2 = 0.999f,
                float eps = 1e-8f, float weight_decay = 0.0f)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps),
        weight_decay_(weight_decay) {}

  float lr() const { return lr_; }

  /// One update over params; lr_override < 0 means use the configured lr.
  void step(std::vector<Tensor>& params, float lr_override = -1.0f) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(size_t(params[i].size()), 0.0f);
        v_[i].assign(size_t(params[i].size()), 0.0f);
      }
    }
    ++t_;
    float lr = lr_override >= 0.0f ? lr_override : lr_;
    double bc1 = 1.0 - std::pow(double(beta1_), double(t_));
    double bc2 = 1.0 - std::pow(double(beta2_), double(t_));
    float alpha = float(double(lr) * std::sqrt(bc2) / bc1);
    for (size_t i = 0; i < params.size(); ++i) {
      if (!params[i].has_grad()) continue;
      auto val = params[i].value();
      auto g = params[i].grad();
      float* m = m_[i].data();
      float* v = v_[i].data();
      for (size_t j = 0; j < val.size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0f - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0f - beta2_) * g[j] * g[j];
        // Decoupled weight decay (AdamW-style).
        val[j] -= alpha * m[j] / (std::sqrt(v[j]) + eps_) +
                  lr * weight_decay_ * val[j];
      }
    }
  }

 private:
  float lr_, beta1_, beta2_, eps_, weight_decay_;
  int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

}  // namespace nsa
