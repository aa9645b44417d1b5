#include "nspforge/autodiff.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "nspforge/rng.hpp"
#include "support/fd.hpp"

using nspforge::Rng;
using nspforge::Tape;

namespace {

std::vector<double> random_params(size_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> p(n);
  for (auto& v : p) v = rng.normal();
  return p;
}

// Runs FD vs tape for a graph builder that maps (tape, param node ids...) to
// a scalar loss. The builder receives the tape and must call param() itself.
void check_gradient(size_t n_params, uint64_t seed,
                    const std::function<int(Tape&)>& build,
                    double tol = 1e-6) {
  const auto params = random_params(n_params, seed);
  std::vector<double> grad(n_params, 0.0);
  Tape tape(params, &grad);
  const int loss = build(tape);
  tape.backward(loss);

  const auto fd = fd_gradient(params, [&](const std::vector<double>& p) {
    Tape t(p, nullptr);
    return t.scalar(build(t));
  });
  EXPECT_LT(max_rel_err(grad, fd), tol) << "seed " << seed;
}

}  // namespace

TEST(tape, lin_values) {
  std::vector<double> params;
  Tape t(params, nullptr);
  const double a[] = {1.0, 2.0, 3.0};
  const double b[] = {4.0, 5.0, 6.0};
  const int id = t.lin(t.constant(a, 1, 3), t.constant(b, 1, 3), 2.0, -1.0);
  EXPECT_EQ(t.val(id)[0], -2.0);
  EXPECT_EQ(t.val(id)[1], -1.0);
  EXPECT_EQ(t.val(id)[2], 0.0);
}

TEST(tape, matmul_values) {
  std::vector<double> params;
  Tape t(params, nullptr);
  const double a[] = {1, 2, 3, 4};     // 2x2
  const double b[] = {5, 6, 7, 8};     // 2x2
  const int ab = t.matmul(t.constant(a, 2, 2), t.constant(b, 2, 2));
  EXPECT_EQ(t.val(ab)[0], 19.0);
  EXPECT_EQ(t.val(ab)[1], 22.0);
  EXPECT_EQ(t.val(ab)[2], 43.0);
  EXPECT_EQ(t.val(ab)[3], 50.0);
  // A^T path: same numbers laid out transposed.
  const double at[] = {1, 3, 2, 4};
  const int ab2 = t.matmul(t.constant(at, 2, 2), t.constant(b, 2, 2), true);
  EXPECT_EQ(t.val(ab2)[0], 19.0);
  EXPECT_EQ(t.val(ab2)[3], 50.0);
}

TEST(tape, rmsnorm_closed_form) {
  // [3,4] with weights sqrt(5.5) and eps -> 0: [3,4] * sqrt(5.5/12.5).
  std::vector<double> params;
  Tape t(params, nullptr);
  const double x[] = {3.0, 4.0};
  const double w[] = {std::sqrt(5.5), std::sqrt(5.5)};
  const int y = t.rmsnorm_rows(t.constant(x, 1, 2), t.constant(w, 1, 2), 0.0);
  EXPECT_NEAR(t.val(y)[0], 1.98997487, 1e-8);
  EXPECT_NEAR(t.val(y)[1], 2.65329983, 1e-8);
}

TEST(tape, gauss_logp_closed_form) {
  // Scalar transition, mean 0, std 1, realized 0: -0.5*ln(2*pi).
  std::vector<double> params;
  Tape t(params, nullptr);
  const double zero = 0.0;
  const int lp =
      t.gauss_logp(t.constant(&zero, 1, 1), t.constant(&zero, 1, 1), 1.0);
  EXPECT_NEAR(t.scalar(lp), -0.9189385332046727, 1e-12);
}

TEST(tape, softmax_rows_sum_to_one) {
  std::vector<double> params;
  Tape t(params, nullptr);
  const double x[] = {0.1, 2.0, -1.0, 5.0, 5.0, 5.0};
  const int y = t.softmax_rows(t.constant(x, 2, 3));
  const auto v = t.val(y);
  EXPECT_NEAR(v[0] + v[1] + v[2], 1.0, 1e-12);
  EXPECT_NEAR(v[3], 1.0 / 3.0, 1e-12);
}

TEST(tape, grad_elementwise_chain) {
  for (uint64_t seed : {1u, 2u, 3u}) {
    check_gradient(6, seed, [](Tape& t) {
      const int p = t.param(0, 2, 3);
      const int a = t.silu(p);
      const int b = t.tanh_(t.scale(p, 0.7));
      const int c = t.hadamard(a, b);
      const int d = t.exp_(t.scale(c, 0.3));
      return t.mean_sq(t.lin(d, a, 1.0, -0.5));
    });
  }
}

TEST(tape, grad_matmul_all_transpose_combos) {
  // 12 params as 3x4 A and 4x3 B views; exercise all four flag pairs.
  for (int combo = 0; combo < 4; ++combo) {
    const bool ta = combo & 1, tb = combo & 2;
    check_gradient(24, 11 + combo, [=](Tape& t) {
      // op(A) must be 3x4 and op(B) 4x2 for the product to be 3x2.
      const int a = ta ? t.param(0, 4, 3) : t.param(0, 3, 4);
      const int b = tb ? t.param(12, 2, 4) : t.param(12, 4, 2);
      return t.mean_sq(t.matmul(a, b, ta, tb));
    });
  }
}

TEST(tape, grad_rowvec_and_reductions) {
  for (uint64_t seed : {21u, 22u}) {
    check_gradient(15, seed, [](Tape& t) {
      const int a = t.param(0, 4, 3);
      const int v = t.param(12, 1, 3);
      const int x = t.add_rowvec(a, v);
      const int m = t.mean_rows(x);
      const int s = t.sum(t.hadamard(m, m));
      return t.lin(s, t.mean_sq(x), 1.0, 2.0);
    });
  }
}

TEST(tape, grad_softmax_rmsnorm) {
  for (uint64_t seed : {31u, 32u}) {
    check_gradient(16, seed, [](Tape& t) {
      const int a = t.param(0, 3, 4);
      const int w = t.param(12, 1, 4);
      const int sm = t.softmax_rows(a);
      const int rn = t.rmsnorm_rows(sm, w, 1e-6);
      return t.mean_sq(rn);
    });
  }
}

TEST(tape, grad_concat_gather_slice) {
  for (uint64_t seed : {41u, 42u}) {
    check_gradient(18, seed, [](Tape& t) {
      const int a = t.param(0, 2, 3);
      const int b = t.param(6, 2, 3);
      const int c = t.param(12, 2, 3);
      const int rows = t.concat_rows(a, b);            // 4x3
      const int g = t.gather_rows(rows, {0, 2, 2, 3, 1});  // 5x3, reuse row 2
      const int wide = t.concat_cols(g, t.gather_rows(c, {0, 1, 0, 1, 1}));
      const int sl = t.slice_rows(wide, 1, 3);
      return t.mean_sq(sl);
    });
  }
}

TEST(tape, grad_scale_by_node) {
  check_gradient(10, 51, [](Tape& t) {
    const int a = t.param(0, 3, 3);
    const int s = t.param(9, 1, 1);
    return t.mean_sq(t.scale_by(a, s));
  });
}

TEST(tape, grad_gauss_logp) {
  for (uint64_t seed : {61u, 62u}) {
    check_gradient(8, seed, [seed](Tape& t) {
      Rng r(seed + 1000);
      std::vector<double> x(8);
      for (auto& v : x) v = r.normal();
      const int mu = t.param(0, 2, 4);
      const int xs = t.constant(x.data(), 2, 4);
      return t.gauss_logp(mu, xs, 0.37);
    });
  }
}

TEST(tape, grad_min_clamp_subgradients) {
  // Values placed away from kinks so FD is valid.
  check_gradient(12, 71, [](Tape& t) {
    const int a = t.param(0, 2, 3);
    const int b = t.param(6, 2, 3);
    const int m = t.min_(a, b);
    const int c = t.clamp(t.scale(m, 1.7), -0.8, 0.8);
    return t.mean_sq(c);
  });
}

TEST(tape, clamp_gradient_zero_outside_range) {
  std::vector<double> params = {5.0};  // far above hi
  std::vector<double> grad(1, 0.0);
  Tape t(params, &grad);
  const int loss = t.mean_sq(t.clamp(t.param(0, 1, 1), -1.0, 1.0));
  t.backward(loss);
  EXPECT_EQ(grad[0], 0.0);
}

TEST(tape, frozen_params_receive_no_gradient) {
  auto params = random_params(12, 81);
  std::vector<uint8_t> trainable(12, 1);
  for (int i = 6; i < 12; ++i) trainable[i] = 0;
  std::vector<double> grad(12, 0.0);
  Tape t(params, &grad, &trainable);
  const int a = t.param(0, 2, 3);
  const int b = t.param(6, 2, 3);
  const int loss = t.mean_sq(t.hadamard(a, b));
  t.backward(loss);
  for (int i = 6; i < 12; ++i) EXPECT_EQ(grad[i], 0.0);
  // Live half must match FD of the same loss.
  const auto fd = fd_gradient(params, [&](const std::vector<double>& p) {
    Tape tt(p, nullptr);
    return tt.scalar(tt.mean_sq(tt.hadamard(tt.param(0, 2, 3), tt.param(6, 2, 3))));
  });
  for (int i = 0; i < 6; ++i) EXPECT_LT(rel_err(grad[i], fd[i]), 1e-6);
}

TEST(tape, gradient_accumulates_across_backward_calls) {
  auto params = random_params(4, 91);
  std::vector<double> grad(4, 0.0);
  Tape t(params, &grad);
  const int loss = t.mean_sq(t.param(0, 2, 2));
  t.backward(loss);
  const auto once = grad;
  t.backward(loss);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(grad[i], 2.0 * once[i]);
}

TEST(tape, composite_mlp_gradient) {
  // Two-layer MLP over a 4x5 input with every trainable group in play.
  const size_t n = 5 * 6 + 6 + 6 * 3 + 3 + 1;
  for (uint64_t seed : {101u, 102u, 103u}) {
    Rng data_rng(seed * 7);
    std::vector<double> x(4 * 5);
    for (auto& v : x) v = data_rng.normal();
    check_gradient(n, seed, [&x](Tape& t) {
      size_t off = 0;
      const int w1 = t.param(off, 5, 6);
      off += 30;
      const int b1 = t.param(off, 1, 6);
      off += 6;
      const int w2 = t.param(off, 6, 3);
      off += 18;
      const int b2 = t.param(off, 1, 3);
      off += 3;
      const int sc = t.param(off, 1, 1);
      const int in = t.constant(x.data(), 4, 5);
      const int h = t.silu(t.add_rowvec(t.matmul(in, w1), b1));
      const int out = t.add_rowvec(t.matmul(h, w2), b2);
      return t.mean_sq(t.scale_by(out, sc));
    });
  }
}

TEST(tape, shape_errors) {
  std::vector<double> params(4, 1.0);
  Tape t(params, nullptr);
  const int a = t.param(0, 2, 2);
  const double v[] = {1, 2, 3};
  const int b = t.constant(v, 1, 3);
  EXPECT_THROW(t.lin(a, b, 1, 1), nspforge::ShapeError);
  EXPECT_THROW(t.matmul(a, b), nspforge::ShapeError);
  EXPECT_THROW(t.param(2, 2, 2), nspforge::ShapeError);
  EXPECT_THROW(t.scalar(a), nspforge::ShapeError);
  EXPECT_THROW(t.gauss_logp(a, a, 0.0), nspforge::DomainError);
}

TEST(tape, backward_protocol) {
  std::vector<double> params(4, 1.0);
  Tape t(params, nullptr);
  const int a = t.param(0, 2, 2);
  EXPECT_THROW(t.backward(a), nspforge::ProtocolError);  // no grad vector

  std::vector<double> grad(4, 0.0);
  Tape t2(params, &grad);
  const std::vector<double> bad(4, std::numeric_limits<double>::quiet_NaN());
  const int nan_loss = t2.mean_sq(
      t2.lin(t2.param(0, 2, 2), t2.constant(bad.data(), 2, 2), 1.0, 1.0));
  EXPECT_THROW(t2.backward(nan_loss), nspforge::NumericsError);
}

TEST(tape, deterministic_across_thread_counts) {
  auto params = random_params(200, 111);
  auto run = [&](int threads) {
    nspforge::global_threads() = threads;
    std::vector<double> grad(200, 0.0);
    Tape t(params, &grad);
    const int a = t.param(0, 10, 10);
    const int b = t.param(100, 10, 10);
    const int loss = t.mean_sq(t.matmul(a, b));
    t.backward(loss);
    nspforge::global_threads() = 1;
    grad.push_back(t.scalar(loss));
    return grad;
  };
  const auto g1 = run(1);
  const auto g4 = run(4);
  ASSERT_EQ(g1.size(), g4.size());
  for (size_t i = 0; i < g1.size(); ++i) EXPECT_EQ(g1[i], g4[i]);
}
