#include "nspforge/sampler.hpp"

#include <gtest/gtest.h>

#include "nspforge/toyworld.hpp"

using namespace nspforge;

namespace {

// Zero-initialized policy with a constant output bias: v is identically c.
VelocityPolicy constant_field_policy(double c) {
  NetConfig net;  // desk shape: 6 frames of 8x8, vocab 10
  VelocityPolicy p(net);
  const auto& b3 = p.segment("trunk_b3");
  std::fill_n(p.params.begin() + static_cast<long>(b3.offset), b3.size, c);
  return p;
}

}  // namespace

TEST(sampler, churn_sigma_profile) {
  EXPECT_EQ(churn_sigma(0.7, 0.0), 0.0);
  EXPECT_NEAR(churn_sigma(0.5, 0.3), 0.3, 1e-15);  // sqrt(0.5/0.5) = 1
  EXPECT_NEAR(churn_sigma(0.9, 1.0), 3.0, 1e-12);  // hits the clip boundary
  EXPECT_EQ(churn_sigma(1.0, 0.3), 3.0);  // capped t keeps it finite, clipped
  EXPECT_NEAR(churn_sigma(0.2, 0.4), 0.4 * std::sqrt(0.25), 1e-15);
  EXPECT_THROW(churn_sigma(0.5, -1.0), DomainError);
}

TEST(sampler, step_mean_coefficients) {
  const StepCoeffs ode = step_coeffs(0.25, 0.0, 0.5);
  EXPECT_EQ(ode.a, 1.0);
  EXPECT_EQ(ode.b, -0.25);
  // sigma = 0.5, t = 0.5: c = 0.25 / 1 = 0.25, a = 1 - 0.25 * 0.25,
  // b = -0.25 * (1 + 0.25 * 0.5)
  const StepCoeffs sde = step_coeffs(0.25, 0.5, 0.5);
  EXPECT_NEAR(sde.a, 0.9375, 1e-15);
  EXPECT_NEAR(sde.b, -0.28125, 1e-15);
  EXPECT_THROW(step_coeffs(0.25, 0.5, 0.0), SingularityError);
  step_coeffs(0.25, 0.0, 0.0);  // deterministic step at t = 0 is fine
}

TEST(sampler, constant_field_integrates_exactly) {
  // v = 2 everywhere, so x0 = x1 - 2 after integrating over unit time.
  // Integer starts with power-of-two steps keep every intermediate value
  // exactly representable, so the equality is bitwise.
  const VelocityPolicy p = constant_field_policy(2.0);
  SamplerConfig sc;
  sc.steps = 4;
  std::vector<double> x1(6 * 64);
  Rng src(3);
  for (auto& v : x1) v = static_cast<double>(src.below(9)) - 4.0;
  Rng rng(3);
  const Rollout ro = rollout(p, nsp_tokens(1), 6, sc, rng, &x1);
  ASSERT_EQ(ro.x0.size(), ro.x1.size());
  for (size_t i = 0; i < ro.x0.size(); ++i)
    EXPECT_EQ(ro.x0[i], ro.x1[i] - 2.0);
  EXPECT_EQ(ro.stochastic_count(), 0);
  EXPECT_EQ(ro.sum_log_prob(), 0.0);
  for (const auto& tr : ro.transitions) {
    EXPECT_FALSE(tr.stochastic);
    EXPECT_EQ(tr.x_after, tr.mean);
  }
}

TEST(sampler, deterministic_rollout_matches_generic_integrator) {
  // The policy rollout must follow the exact arithmetic of the generic
  // kernel when run with the same velocity evaluations.
  NetConfig net;
  VelocityPolicy p(net);
  p.init_params(17);
  SamplerConfig sc;
  sc.steps = 6;
  sc.guidance = 3.0;
  Rng rng(5);
  const Rollout tape_ro = rollout(p, nsp_tokens(4), 6, sc, rng);

  auto velocity = [&](const std::vector<double>& x, double t) {
    Tape tape(p.params, nullptr);
    const int cond = p.condition_tokens(tape, nsp_tokens(4));
    const int v = p.cfg_velocity(tape, tape.constant(x.data(), 6, 64), cond, t,
                                 sc.guidance);
    auto s = tape.val(v);
    return std::vector<double>(s.begin(), s.end());
  };
  Rng rng2(99);  // no draws happen on a deterministic run
  const Rollout plain = integrate(velocity, tape_ro.x1, sc, rng2);
  EXPECT_EQ(plain.x0, tape_ro.x0);
  for (int k = 0; k < sc.steps; ++k)
    EXPECT_EQ(plain.transitions[k].mean, tape_ro.transitions[k].mean);
}

TEST(sampler, stochastic_schedule_shape) {
  const VelocityPolicy p = constant_field_policy(0.5);
  SamplerConfig sc;
  sc.steps = 4;
  sc.eta = 0.5;
  Rng rng(8);
  const Rollout ro = rollout(p, t2v_tokens(2), 6, sc, rng);
  ASSERT_EQ(ro.transitions.size(), 4u);
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(ro.transitions[k].t_hi, (4.0 - k) / 4.0);
    EXPECT_EQ(ro.transitions[k].t_lo, (3.0 - k) / 4.0);
  }
  EXPECT_EQ(ro.stochastic_count(), 3);  // final step is always deterministic
  for (int k = 0; k < 3; ++k) {
    EXPECT_TRUE(ro.transitions[k].stochastic);
    EXPECT_GT(ro.transitions[k].std, 0.0);
    EXPECT_TRUE(std::isfinite(ro.transitions[k].log_prob));
    EXPECT_NE(ro.transitions[k].x_after, ro.transitions[k].mean);
  }
  EXPECT_FALSE(ro.transitions[3].stochastic);
  EXPECT_EQ(ro.transitions[3].std, 0.0);
  EXPECT_EQ(ro.transitions[3].log_prob, 0.0);
}

TEST(sampler, log_prob_matches_independent_summation) {
  const VelocityPolicy p = constant_field_policy(1.0);
  SamplerConfig sc;
  sc.steps = 5;
  sc.eta = 0.4;
  Rng rng(21);
  const Rollout ro = rollout(p, nsp_tokens(3), 6, sc, rng);
  for (const auto& tr : ro.transitions) {
    if (!tr.stochastic) continue;
    long double acc = 0.0L;  // higher precision, reversed order
    for (size_t i = tr.x_after.size(); i-- > 0;) {
      const long double d = tr.x_after[i] - tr.mean[i];
      acc -= d * d / (2.0L * tr.std * tr.std);
    }
    acc -= static_cast<long double>(tr.x_after.size()) *
           (std::log((long double)tr.std) +
            0.5L * std::log(2.0L * std::numbers::pi_v<long double>));
    EXPECT_NEAR(tr.log_prob, static_cast<double>(acc), 1e-9);
  }
}

TEST(sampler, cpu_and_tape_log_density_agree_bitwise) {
  Rng rng(31);
  std::vector<double> x(100), mean(100);
  rng.fill_normal(x.data(), x.size());
  rng.fill_normal(mean.data(), mean.size());
  const double sigma = 0.37;
  std::vector<double> params;
  Tape tape(params, nullptr);
  const double tape_val = tape.scalar(
      tape.gauss_logp(tape.constant(mean.data(), 10, 10),
                      tape.constant(x.data(), 10, 10), sigma));
  EXPECT_EQ(gauss_log_density(x, mean, sigma), tape_val);
}

TEST(sampler, replay_reproduces_log_probs_exactly) {
  NetConfig net;
  VelocityPolicy p(net);
  p.init_params(9);
  SamplerConfig sc;
  sc.steps = 6;
  sc.eta = 0.3;
  sc.guidance = 3.0;
  Rng rng(41);
  const Rollout ro = rollout(p, nsp_tokens(6), 6, sc, rng);
  EXPECT_EQ(log_prob_under(p, ro), ro.sum_log_prob());  // bitwise

  Tape tape(p.params, nullptr);
  const auto nodes = log_prob_nodes(p, tape, ro);
  ASSERT_EQ(nodes.size(), 5u);
  size_t ni = 0;
  for (const auto& tr : ro.transitions) {
    if (tr.stochastic) {
      EXPECT_EQ(tape.scalar(nodes[ni++]), tr.log_prob);
    }
  }
}

TEST(sampler, replay_rejects_mismatched_settings) {
  NetConfig net;
  VelocityPolicy p(net);
  p.init_params(2);
  SamplerConfig sc;
  sc.steps = 4;
  sc.eta = 0.5;
  Rng rng(1);
  const Rollout ro = rollout(p, nsp_tokens(0), 6, sc, rng);
  Rollout bad_steps = ro;
  bad_steps.sc.steps = 5;
  EXPECT_THROW(log_prob_under(p, bad_steps), ProtocolError);
  Rollout bad_eta = ro;
  bad_eta.sc.eta = 0.7;
  EXPECT_THROW(log_prob_under(p, bad_eta), ProtocolError);
}

TEST(sampler, point_mass_field_lands_on_target) {
  // For data concentrated at a, the exact velocity field is (x - a) / t and
  // Euler follows the straight characteristic without error.
  const double a = 0.7;
  auto velocity = [a](const std::vector<double>& x, double t) {
    std::vector<double> v(x.size());
    for (size_t i = 0; i < x.size(); ++i) v[i] = (x[i] - a) / t;
    return v;
  };
  SamplerConfig sc;
  sc.steps = 32;
  Rng rng(77);
  for (int i = 0; i < 200; ++i) {
    const Rollout ro = integrate(velocity, {rng.normal()}, sc, rng);
    EXPECT_NEAR(ro.x0[0], a, 1e-9);
  }
}

TEST(sampler, gaussian_marginal_preserved_by_churn) {
  // For standard normal data the exact field is (2t - 1) x / ((1-t)^2 + t^2)
  // and the t = 0 marginal is N(0, 1) for every eta; a wrong churn
  // correction would visibly skew the sampled variance.
  auto velocity = [](const std::vector<double>& x, double t) {
    const double s = (2.0 * t - 1.0) / ((1.0 - t) * (1.0 - t) + t * t);
    return std::vector<double>{x[0] * s};
  };
  for (double eta : {0.0, 0.3}) {
    SamplerConfig sc;
    sc.steps = 64;
    sc.eta = eta;
    Rng rng(55);
    double sum = 0.0, sum2 = 0.0;
    const int n = 4000;
    for (int i = 0; i < n; ++i) {
      const Rollout ro = integrate(velocity, {rng.normal()}, sc, rng);
      sum += ro.x0[0];
      sum2 += ro.x0[0] * ro.x0[0];
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    EXPECT_NEAR(mean, 0.0, 0.06) << "eta " << eta;
    EXPECT_NEAR(var, 1.0, 0.12) << "eta " << eta;
  }
}

TEST(sampler, shared_noise_seeds_the_group) {
  NetConfig net;
  VelocityPolicy p(net);
  p.init_params(4);
  SamplerConfig sc;
  sc.steps = 5;
  sc.eta = 0.3;
  std::vector<double> x1(6 * 64);
  Rng src(13);
  src.fill_normal(x1.data(), x1.size());
  Rng a(100), b(100), c(101);
  const Rollout r1 = rollout(p, nsp_tokens(2), 6, sc, a, &x1);
  const Rollout r2 = rollout(p, nsp_tokens(2), 6, sc, b, &x1);
  const Rollout r3 = rollout(p, nsp_tokens(2), 6, sc, c, &x1);
  EXPECT_EQ(r1.x0, r2.x0);  // same start, same churn stream
  EXPECT_EQ(r1.x1, r3.x1);  // same start...
  EXPECT_NE(r1.x0, r3.x0);  // ...different churn
}

TEST(sampler, video_wrapper_and_trace) {
  NetConfig net;
  VelocityPolicy p(net);
  p.init_params(6);
  SamplerConfig sc;
  sc.steps = 8;
  Rng rng(2);
  const LatentVideo v = sample_video(p, t2v_tokens(3), 6, 8, 8, sc, rng);
  EXPECT_TRUE(v.all_finite());
  EXPECT_THROW(sample_video(p, t2v_tokens(3), 6, 4, 4, sc, rng), ShapeError);

  Rng rng2(3);
  const Rollout ro = rollout(p, t2v_tokens(3), 6, sc, rng2);
  const std::string csv = trajectory_csv(ro);
  size_t lines = 0;
  for (char ch : csv) lines += ch == '\n';
  EXPECT_EQ(lines, 9u);  // header + one row per step
}
