#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "nspforge/config.hpp"
#include "nspforge/errors.hpp"

namespace nspforge {

// Decoupled-weight-decay Adam over a flat parameter vector. Masked-out
// coordinates are skipped entirely — no moment update, no decay — so frozen
// segments stay bit-identical through any number of steps.
class AdamW {
 public:
  AdamW(size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8, double weight_decay = 0.0)
      : lr_(lr),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps),
        wd_(weight_decay),
        m_(n, 0.0),
        v_(n, 0.0) {
    if (!(lr > 0.0)) throw ConfigError("adamw: lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("adamw: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("adamw: eps must be > 0");
  }

  static AdamW from_config(const Config& c, size_t n, double lr) {
    return AdamW(n, lr, c.optim_beta1, c.optim_beta2, c.optim_eps,
                 c.optim_weight_decay);
  }

  int steps_taken() const { return t_; }
  double lr() const { return lr_; }

  void step(std::vector<double>& params, const std::vector<double>& grad,
            const std::vector<uint8_t>* mask = nullptr) {
    if (params.size() != m_.size() || grad.size() != m_.size())
      throw ShapeError("adamw: parameter/gradient size mismatch");
    if (mask && mask->size() != m_.size())
      throw ShapeError("adamw: mask size mismatch");
    t_++;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < params.size(); ++i) {
      if (mask && !(*mask)[i]) continue;
      const double g = grad[i];
      if (!std::isfinite(g)) throw NumericsError("adamw: non-finite gradient");
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
      const double mhat = m_[i] / bc1;
      const double vhat = v_[i] / bc2;
      params[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * params[i]);
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_, wd_;
  int t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace nspforge
