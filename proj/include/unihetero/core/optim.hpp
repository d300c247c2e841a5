#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "unihetero/core/tensor.hpp"

namespace unihetero {

/// target <- m * target + (1 - m) * online, element-wise, outside any tape.
template <class T>
void ema_update(ParameterList<T>& target, const ParameterList<T>& online, T momentum) {
  if (!(momentum >= T(0) && momentum < T(1))) throw std::invalid_argument("ema_update: momentum must lie in [0, 1)");
  if (target.size() != online.size()) {
    throw ShapeError("ema_update: " + std::to_string(target.size()) + " target tensors vs " +
                     std::to_string(online.size()) + " online tensors");
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    auto& t = target[i].tensor;
    const auto& o = online[i].tensor;
    if (t.shape() != o.shape()) throw ShapeError("ema_update(" + target[i].name + ")", t.shape(), o.shape());
    for (std::size_t j = 0; j < t.numel(); ++j) t[j] = momentum * t[j] + (T(1) - momentum) * o[j];
  }
}

template <class T>
double global_grad_norm(const ParameterList<T>& params) {
  double ss = 0.0;
  for (const auto& p : params)
    for (T g : p.tensor.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(ss);
}

/// Scales all grads so the global L2 norm is at most max_norm. Returns the pre-clip norm.
template <class T>
double clip_grad_norm(ParameterList<T>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& p : params)
      for (T& g : p.tensor.grad()) g *= s;
  }
  return norm;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay applied to rank-2 weights only.
template <class T>
class AdamW {
 public:
  AdamW(ParameterList<T> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), T(0));
      v_.emplace_back(p.tensor.numel(), T(0));
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(cfg_.eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].tensor;
      const bool decay = p.rank() == 2 && cfg_.weight_decay > 0.0;
      const T wd = static_cast<T>(lr * cfg_.weight_decay);
      auto g = p.grad();
      auto w = p.data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        if (decay) w[j] -= wd * w[j];
        w[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
      }
    }
  }

  void zero_grad() { zero_grads(params_); }
  ParameterList<T>& params() { return params_; }
  long steps_taken() const { return t_; }

 private:
  ParameterList<T> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  long t_ = 0;
};

/// Linear warm-up followed by cosine decay to zero. step is 0-based.
inline double cosine_lr(double peak, long step, long total_steps, double warmup_fraction) {
  const long warmup = static_cast<long>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(std::max<long>(1, total_steps - warmup));
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace unihetero
