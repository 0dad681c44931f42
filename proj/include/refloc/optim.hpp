#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "refloc/autograd.hpp"
#include "refloc/error.hpp"

namespace refloc {

struct OptimConfig {
  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double grad_clip = 1.0;  // <= 0 disables clipping
  int warmup_steps = 0;

  friend bool operator==(const OptimConfig&, const OptimConfig&) = default;
};

inline void validate(const OptimConfig& c) {
  if (!(c.lr > 0)) throw ValidationError("optimizer: lr must be positive");
  if (!(c.beta1 >= 0 && c.beta1 < 1 && c.beta2 >= 0 && c.beta2 < 1)) throw ValidationError("optimizer: betas must lie in [0,1)");
  if (!(c.eps > 0)) throw ValidationError("optimizer: eps must be positive");
  if (c.weight_decay < 0) throw ValidationError("optimizer: weight_decay must be >= 0");
  if (c.warmup_steps < 0) throw ValidationError("optimizer: warmup_steps must be >= 0");
}

/// Linear warmup then cosine decay to zero over `total` steps.
inline double cosine_lr(double base, long step, long total, long warmup) {
  if (warmup > 0 && step < warmup) return base * double(step + 1) / double(warmup);
  if (total <= warmup) return base;
  const double t = std::min(1.0, double(step - warmup) / double(total - warmup));
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Decoupled-weight-decay Adam. Matrices with one row (biases, norm
/// parameters, scalars) are not decayed.
template <class T>
class AdamW {
 public:
  using Mat = nn::Matrix<T>;

  AdamW() = default;
  AdamW(const OptimConfig& config, const std::vector<nn::Parameter<T>>& params) : config_(config) {
    validate(config_);
    for (const auto& p : params) {
      m_.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
    }
  }

  const OptimConfig& config() const { return config_; }
  long step_count() const { return t_; }
  std::vector<Mat>& first_moments() { return m_; }
  std::vector<Mat>& second_moments() { return v_; }
  const std::vector<Mat>& first_moments() const { return m_; }
  const std::vector<Mat>& second_moments() const { return v_; }
  void set_step_count(long t) { t_ = t; }

  /// Global L2 norm of the gradients of trainable parameters.
  static double grad_norm(const std::vector<nn::Parameter<T>>& params) {
    double s = 0;
    for (const auto& p : params) {
      if (!p.frozen) s += double(p.grad.squaredNorm());
    }
    return std::sqrt(s);
  }

  /// Applies one update at learning rate `lr`; returns the pre-clip norm.
  double step(std::vector<nn::Parameter<T>>& params, double lr) {
    if (params.size() != m_.size()) throw std::invalid_argument("AdamW: parameter count changed");
    const double norm = grad_norm(params);
    if (!std::isfinite(norm)) throw DivergenceError("non-finite gradient norm");
    const double clip = config_.grad_clip > 0 && norm > config_.grad_clip ? config_.grad_clip / norm : 1.0;
    ++t_;
    const T b1 = T(config_.beta1), b2 = T(config_.beta2);
    const T c1 = T(1 - std::pow(config_.beta1, double(t_)));
    const T c2 = T(1 - std::pow(config_.beta2, double(t_)));
    const T lr_t = T(lr), eps = T(config_.eps), wd = T(config_.weight_decay), cs = T(clip);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (p.frozen) continue;
      auto g = (p.grad.array() * cs).eval();
      m_[i].array() = b1 * m_[i].array() + (T(1) - b1) * g;
      v_[i].array() = b2 * v_[i].array() + (T(1) - b2) * g.square();
      if (p.value.rows() > 1 && wd > 0) p.value.array() -= lr_t * wd * p.value.array();
      p.value.array() -= lr_t * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
    }
    return norm;
  }

 private:
  OptimConfig config_;
  std::vector<Mat> m_, v_;
  long t_ = 0;
};

}  // namespace refloc
