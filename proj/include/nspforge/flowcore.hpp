#pragma once

#include <cmath>
#include <vector>

#include "nspforge/autodiff.hpp"
#include "nspforge/errors.hpp"
#include "nspforge/netstack.hpp"
#include "nspforge/rng.hpp"
#include "nspforge/toyworld.hpp"

namespace nspforge {

// Straight-line bridge between a data sample (t = 0) and pure noise (t = 1).
inline std::vector<double> interpolate(const std::vector<double>& x0,
                                       const std::vector<double>& x1,
                                       double t) {
  if (x0.size() != x1.size())
    throw ShapeError("interpolate: endpoint sizes disagree");
  if (!(t >= 0.0 && t <= 1.0))
    throw DomainError("interpolate: t must lie in [0, 1]");
  std::vector<double> out(x0.size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = (1.0 - t) * x0[i] + t * x1[i];
  return out;
}

// The regression target along that bridge: constant noise-minus-data.
inline std::vector<double> velocity_target(const std::vector<double>& x0,
                                           const std::vector<double>& x1) {
  if (x0.size() != x1.size())
    throw ShapeError("velocity_target: endpoint sizes disagree");
  std::vector<double> out(x0.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = x1[i] - x0[i];
  return out;
}

struct FmLossOptions {
  const std::vector<uint8_t>* mask = nullptr;  // trainable-parameter mask
  bool dropout = true;  // replace the condition with null_emb at the net rate
};

namespace detail {

// Adds one sample's squared-error node to the tape and returns it (1x1).
inline int fm_sample_loss(const VelocityPolicy& policy, Tape& tape,
                          const std::vector<uint32_t>& tokens, bool drop,
                          const std::vector<double>& x0,
                          const std::vector<double>& x1, double t) {
  const int fs = policy.config().frame_size;
  if (x0.size() % fs != 0 || x0.empty())
    throw ShapeError("flow loss: sample size is not a frame multiple");
  const int frames = static_cast<int>(x0.size()) / fs;
  const std::vector<double> xt = interpolate(x0, x1, t);
  const std::vector<double> target = velocity_target(x0, x1);
  const int cond =
      drop ? policy.condition_null(tape) : policy.condition_tokens(tape, tokens);
  const int v = policy.velocity(tape, tape.constant(xt.data(), frames, fs),
                                cond, t);
  return tape.mean_sq(
      tape.lin(v, tape.constant(target.data(), frames, fs), 1.0, -1.0));
}

}  // namespace detail

// Mean over the batch of per-sample mean squared error between the predicted
// velocity and noise-minus-data, at per-sample t ~ U[0,1] and fresh noise.
// When grad is non-null the gradient is accumulated into it. Draw order per
// sample is pinned (t, noise, dropout coin) so a seed fixes the whole batch.
inline double fm_loss(const VelocityPolicy& policy,
                      const std::vector<const SceneRecord*>& batch, Rng& rng,
                      std::vector<double>* grad,
                      const FmLossOptions& opt = {}) {
  if (batch.empty()) throw ProtocolError("fm_loss: empty batch");
  Tape tape(policy.params, grad, opt.mask);
  const double p_drop = policy.config().cond_dropout;
  int total = -1;
  for (size_t i = 0; i < batch.size(); ++i) {
    const SceneRecord& rec = *batch[i];
    const double t = rng.uniform();
    std::vector<double> x1(rec.latent.size());
    rng.fill_normal(x1.data(), x1.size());
    const bool drop = opt.dropout && p_drop > 0.0 && rng.uniform() < p_drop;
    const std::vector<double> x0(rec.latent.begin(), rec.latent.end());
    const int ls =
        detail::fm_sample_loss(policy, tape, rec.tokens, drop, x0, x1, t);
    if (!std::isfinite(tape.scalar(ls)))
      throw NumericsError("non-finite flow loss", static_cast<int>(i));
    total = total < 0 ? ls : tape.lin(total, ls, 1.0, 1.0);
  }
  const int loss = tape.scale(total, 1.0 / static_cast<double>(batch.size()));
  if (grad) tape.backward(loss);
  return tape.scalar(loss);
}

// Single-sample loss with every random input pinned by the caller; the
// deterministic probe used by gradient checks and exact-value tests.
inline double fm_loss_single(const VelocityPolicy& policy,
                             const std::vector<uint32_t>& tokens,
                             const std::vector<double>& x0,
                             const std::vector<double>& x1, double t,
                             std::vector<double>* grad = nullptr,
                             const std::vector<uint8_t>* mask = nullptr) {
  Tape tape(policy.params, grad, mask);
  const int ls = detail::fm_sample_loss(policy, tape, tokens, false, x0, x1, t);
  if (!std::isfinite(tape.scalar(ls)))
    throw NumericsError("non-finite flow loss", 0);
  if (grad) tape.backward(ls);
  return tape.scalar(ls);
}

}  // namespace nspforge
