#pragma once

#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "nspforge/autodiff.hpp"
#include "nspforge/errors.hpp"
#include "nspforge/latent.hpp"
#include "nspforge/netstack.hpp"
#include "nspforge/rng.hpp"

namespace nspforge {

struct SamplerConfig {
  int steps = 50;
  double eta = 0.0;       // 0: deterministic; > 0: stochastic churn scale
  double guidance = 1.0;  // condition contrast s in v_null + s (v_cond - v_null)
};

// Churn level at time t: eta * sqrt(t / (1 - t)) with t capped just below 1
// and the result clipped to [0, 3], so the first step never blows up.
inline double churn_sigma(double t, double eta) {
  if (eta == 0.0) return 0.0;
  if (!(eta > 0.0)) throw DomainError("churn_sigma: eta must be >= 0");
  constexpr double kDelta = 1e-3;
  const double t_eff = std::min(t, 1.0 - kDelta);
  const double s = eta * std::sqrt(t_eff / (1.0 - t_eff));
  return std::min(s, 3.0);
}

// The one-step mean is a (x, v) combination shared verbatim by the plain
// integrator and the tape recomputation, so a stochastic run at sigma = 0
// is bit-identical to the deterministic one and stored transitions replay
// to the exact same log probabilities.
struct StepCoeffs {
  double a, b;
};

inline StepCoeffs step_coeffs(double dt, double sigma, double t_hi) {
  if (sigma == 0.0) return {1.0, -dt};
  if (!(t_hi > 0.0))
    throw SingularityError("stochastic step at t = 0 has unbounded drift");
  const double c = sigma * sigma / (2.0 * t_hi);
  return {1.0 - dt * c, -dt * (1.0 + c * (1.0 - t_hi))};
}

// CPU mirror of the tape's Gaussian log density, same accumulation order.
inline double gauss_log_density(const std::vector<double>& x,
                                const std::vector<double>& mean, double sigma) {
  if (x.size() != mean.size())
    throw ShapeError("gauss_log_density: size mismatch");
  if (!(sigma > 0.0)) throw DomainError("gauss_log_density: sigma must be > 0");
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  double acc = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - mean[i];
    acc -= d * d * inv2s2;
  }
  acc -= static_cast<double>(x.size()) *
         (std::log(sigma) + 0.5 * std::log(2.0 * std::numbers::pi));
  return acc;
}

// One integration step, recorded for later replay. x_before enters the
// velocity net; x_after = mean + std * noise leaves the step.
struct Transition {
  int index = 0;
  double t_hi = 0.0, t_lo = 0.0;
  double std = 0.0;       // 0 on deterministic steps
  double log_prob = 0.0;  // 0 on deterministic steps
  bool stochastic = false;
  std::vector<double> x_before, mean, x_after;
};

struct Rollout {
  std::vector<uint32_t> tokens;  // prompt; empty for unconditional runs
  int frames = 0;
  SamplerConfig sc;
  std::vector<double> x1;  // initial noise
  std::vector<double> x0;  // final sample
  std::vector<Transition> transitions;

  double sum_log_prob() const {
    double s = 0.0;
    for (const auto& tr : transitions)
      if (tr.stochastic) s += tr.log_prob;
    return s;
  }
  int stochastic_count() const {
    int n = 0;
    for (const auto& tr : transitions) n += tr.stochastic;
    return n;
  }
};

// Descending uniform grid over [0, 1]: t_k = (steps - k) / steps.
inline double schedule_t(int steps, int k) {
  return static_cast<double>(steps - k) / static_cast<double>(steps);
}

// Generic integrator over a plain velocity callable
//   v(const std::vector<double>& x, double t) -> std::vector<double>.
// Runs t = 1 -> 0 in sc.steps equal steps; every step but the last draws
// churn noise when sc.eta > 0; the final step is always deterministic.
template <class VelocityFn>
Rollout integrate(VelocityFn&& velocity, std::vector<double> x1,
                  const SamplerConfig& sc, Rng& rng) {
  if (sc.steps < 1) throw ConfigError("sampler steps must be >= 1");
  if (sc.eta < 0.0) throw ConfigError("sampler eta must be >= 0");
  Rollout ro;
  ro.frames = 0;
  ro.sc = sc;
  ro.x1 = x1;
  std::vector<double> x = std::move(x1);
  std::vector<double> noise(x.size());
  for (int k = 0; k < sc.steps; ++k) {
    const double t_hi = schedule_t(sc.steps, k);
    const double t_lo = schedule_t(sc.steps, k + 1);
    const double dt = t_hi - t_lo;
    const bool last = k == sc.steps - 1;
    const double sigma = last ? 0.0 : churn_sigma(t_hi, sc.eta);
    const std::vector<double> v = velocity(x, t_hi);
    if (v.size() != x.size()) throw ShapeError("integrate: velocity size");
    Transition tr;
    tr.index = k;
    tr.t_hi = t_hi;
    tr.t_lo = t_lo;
    tr.x_before = x;
    const StepCoeffs cf = step_coeffs(dt, sigma, t_hi);
    tr.mean.resize(x.size());
    for (size_t i = 0; i < x.size(); ++i)
      tr.mean[i] = cf.a * x[i] + cf.b * v[i];
    if (sigma > 0.0) {
      tr.std = sigma * std::sqrt(dt);
      rng.fill_normal(noise.data(), noise.size());
      tr.x_after.resize(x.size());
      for (size_t i = 0; i < x.size(); ++i)
        tr.x_after[i] = tr.mean[i] + tr.std * noise[i];
      tr.log_prob = gauss_log_density(tr.x_after, tr.mean, tr.std);
      tr.stochastic = true;
    } else {
      tr.x_after = tr.mean;
    }
    x = tr.x_after;
    ro.transitions.push_back(std::move(tr));
  }
  ro.x0 = std::move(x);
  return ro;
}

// Policy rollout: velocity and log probabilities are computed through tape
// nodes — the same ops the learner replays — so ratios at unchanged
// parameters are exactly one. Draw order: x1 (unless supplied), then one
// noise block per stochastic step.
inline Rollout rollout(const VelocityPolicy& policy,
                       const std::vector<uint32_t>& tokens, int frames,
                       const SamplerConfig& sc, Rng& rng,
                       const std::vector<double>* shared_x1 = nullptr) {
  if (sc.steps < 1) throw ConfigError("sampler steps must be >= 1");
  if (sc.eta < 0.0) throw ConfigError("sampler eta must be >= 0");
  const int fs = policy.config().frame_size;
  const size_t n = static_cast<size_t>(frames) * fs;
  Rollout ro;
  ro.tokens = tokens;
  ro.frames = frames;
  ro.sc = sc;
  if (shared_x1) {
    if (shared_x1->size() != n) throw ShapeError("rollout: shared x1 size");
    ro.x1 = *shared_x1;
  } else {
    ro.x1.resize(n);
    rng.fill_normal(ro.x1.data(), n);
  }

  Tape tape(policy.params, nullptr);
  const int cond = policy.condition_tokens(tape, tokens);
  std::vector<double> x = ro.x1;
  std::vector<double> noise(n);
  for (int k = 0; k < sc.steps; ++k) {
    const double t_hi = schedule_t(sc.steps, k);
    const double t_lo = schedule_t(sc.steps, k + 1);
    const double dt = t_hi - t_lo;
    const bool last = k == sc.steps - 1;
    const double sigma = last ? 0.0 : churn_sigma(t_hi, sc.eta);
    const int xn = tape.constant(x.data(), frames, fs);
    const int vn = policy.cfg_velocity(tape, xn, cond, t_hi, sc.guidance);
    const StepCoeffs cf = step_coeffs(dt, sigma, t_hi);
    const int mean_node = tape.lin(xn, vn, cf.a, cf.b);
    const auto mean = tape.val(mean_node);
    Transition tr;
    tr.index = k;
    tr.t_hi = t_hi;
    tr.t_lo = t_lo;
    tr.x_before = x;
    tr.mean.assign(mean.begin(), mean.end());
    if (sigma > 0.0) {
      tr.std = sigma * std::sqrt(dt);
      rng.fill_normal(noise.data(), n);
      tr.x_after.resize(n);
      for (size_t i = 0; i < n; ++i)
        tr.x_after[i] = tr.mean[i] + tr.std * noise[i];
      tr.log_prob = tape.scalar(tape.gauss_logp(
          mean_node, tape.constant(tr.x_after.data(), frames, fs), tr.std));
      tr.stochastic = true;
    } else {
      tr.x_after = tr.mean;
    }
    x = tr.x_after;
    ro.transitions.push_back(std::move(tr));
  }
  ro.x0 = std::move(x);
  return ro;
}

// Rebuilds the log probability of each stochastic transition of a stored
// rollout under the policy's current parameters, as tape nodes in transition
// order. The sampler settings must match the ones the rollout was made with.
// Pass a precomputed condition node to share one prompt encoding across
// rollouts of the same prompt.
inline std::vector<int> log_prob_nodes(const VelocityPolicy& policy, Tape& tape,
                                       const Rollout& ro, int cond_node = -1) {
  const SamplerConfig& sc = ro.sc;
  if (static_cast<int>(ro.transitions.size()) != sc.steps)
    throw ProtocolError("log_prob replay: transition count != steps");
  const int fs = policy.config().frame_size;
  const int cond =
      cond_node >= 0 ? cond_node : policy.condition_tokens(tape, ro.tokens);
  std::vector<int> nodes;
  for (const auto& tr : ro.transitions) {
    if (!tr.stochastic) continue;
    const double dt = tr.t_hi - tr.t_lo;
    const double sigma = churn_sigma(tr.t_hi, sc.eta);
    const double want_std = sigma * std::sqrt(dt);
    if (want_std != tr.std)
      throw ProtocolError("log_prob replay: sampler settings do not match");
    const int xn = tape.constant(tr.x_before.data(), ro.frames, fs);
    const int vn = policy.cfg_velocity(tape, xn, cond, tr.t_hi, sc.guidance);
    const StepCoeffs cf = step_coeffs(dt, sigma, tr.t_hi);
    const int mean_node = tape.lin(xn, vn, cf.a, cf.b);
    nodes.push_back(tape.gauss_logp(
        mean_node, tape.constant(tr.x_after.data(), ro.frames, fs), tr.std));
  }
  return nodes;
}

inline double log_prob_under(const VelocityPolicy& policy, const Rollout& ro) {
  Tape tape(policy.params, nullptr);
  double sum = 0.0;
  for (int id : log_prob_nodes(policy, tape, ro)) sum += tape.scalar(id);
  return sum;
}

// Prompt-to-video convenience over the policy rollout.
inline LatentVideo sample_video(const VelocityPolicy& policy,
                                const std::vector<uint32_t>& tokens, int frames,
                                int h, int w, const SamplerConfig& sc,
                                Rng& rng) {
  if (h * w != policy.config().frame_size)
    throw ShapeError("sample_video: h * w != frame_size");
  const Rollout ro = rollout(policy, tokens, frames, sc, rng);
  LatentVideo v(frames, h, w);
  v.data = ro.x0;
  return v;
}

// Per-step trace for eyeballing integration behavior.
inline std::string trajectory_csv(const Rollout& ro) {
  std::string out = "index,t_hi,t_lo,std,stochastic,log_prob,x_norm\n";
  char line[160];
  for (const auto& tr : ro.transitions) {
    double nrm = 0.0;
    for (double v : tr.x_after) nrm += v * v;
    std::snprintf(line, sizeof line, "%d,%.6f,%.6f,%.9g,%d,%.9g,%.9g\n",
                  tr.index, tr.t_hi, tr.t_lo, tr.std, tr.stochastic ? 1 : 0,
                  tr.log_prob, std::sqrt(nrm));
    out += line;
  }
  return out;
}

}  // namespace nspforge
