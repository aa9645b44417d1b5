#include "nspforge/netstack.hpp"

#include <gtest/gtest.h>

#include "nspforge/toyworld.hpp"

using namespace nspforge;

namespace {

NetConfig desk_net() {
  NetConfig n;  // defaults match the desk world: vocab 10, 6 frames of 8x8
  return n;
}

VelocityPolicy fresh_policy(uint64_t seed = 11) {
  VelocityPolicy p(desk_net());
  p.init_params(seed);
  return p;
}

std::vector<double> node_values(const Tape& tape, int id) {
  auto s = tape.val(id);
  return std::vector<double>(s.begin(), s.end());
}

}  // namespace

TEST(netstack, parameter_layout_is_pinned) {
  const VelocityPolicy p(desk_net());
  EXPECT_EQ(p.param_count(), 45601u);
  const std::vector<std::string> want = {
      "queries",  "conn_w1",  "conn_w2",  "conn_rmsw", "conn_scale",
      "null_emb", "time_w",   "time_b",   "frame_tab", "trunk_w1",
      "trunk_b1", "trunk_w2", "trunk_b2", "trunk_w3",  "trunk_b3"};
  ASSERT_EQ(p.segments().size(), want.size());
  size_t off = 0;
  for (size_t i = 0; i < want.size(); ++i) {
    EXPECT_EQ(p.segments()[i].name, want[i]);
    EXPECT_EQ(p.segments()[i].offset, off);  // contiguous, no gaps
    off += p.segments()[i].size;
  }
  EXPECT_EQ(off, p.param_count());
  EXPECT_THROW(p.segment("no_such"), ProtocolError);
}

TEST(netstack, init_is_seed_deterministic) {
  VelocityPolicy a = fresh_policy(3), b = fresh_policy(3), c = fresh_policy(4);
  EXPECT_EQ(a.params, b.params);
  EXPECT_NE(a.params, c.params);
  const auto& scale = a.segment("conn_scale");
  EXPECT_EQ(a.params[scale.offset], 0.01);
  const auto& rmsw = a.segment("conn_rmsw");
  EXPECT_EQ(a.params[rmsw.offset], std::sqrt(5.5));
  const auto& null_emb = a.segment("null_emb");
  for (size_t i = 0; i < null_emb.size; ++i)
    EXPECT_EQ(a.params[null_emb.offset + i], 0.0);
}

TEST(netstack, conditioning_is_deterministic_and_injective) {
  const VelocityPolicy p = fresh_policy();
  auto pooled = [&](const std::vector<uint32_t>& tokens) {
    Tape tape(p.params, nullptr);
    return node_values(tape, p.condition_tokens(tape, tokens));
  };
  EXPECT_EQ(pooled(nsp_tokens(3)), pooled(nsp_tokens(3)));
  // All K class prompts in both instruction modes map to distinct vectors.
  std::vector<std::vector<double>> seen;
  for (int c = 0; c < 8; ++c) {
    seen.push_back(pooled(nsp_tokens(c)));
    seen.push_back(pooled(t2v_tokens(c)));
  }
  for (size_t i = 0; i < seen.size(); ++i)
    for (size_t j = i + 1; j < seen.size(); ++j)
      EXPECT_NE(seen[i], seen[j]);
}

TEST(netstack, token_validation) {
  const VelocityPolicy p = fresh_policy();
  Tape tape(p.params, nullptr);
  EXPECT_THROW(p.condition_tokens(tape, {}), TokenError);
  EXPECT_THROW(p.condition_tokens(tape, {10}), TokenError);  // vocab is 10
  EXPECT_THROW(p.condition_tokens(tape, std::vector<uint32_t>(17, 2)),
               TokenError);  // 17 tokens + 16 queries > l_max = 32
  p.condition_tokens(tape, std::vector<uint32_t>(16, 2));  // exactly l_max
}

TEST(netstack, connector_maps_zero_to_zero) {
  const VelocityPolicy p = fresh_policy();
  Tape tape(p.params, nullptr);
  const std::vector<double> zeros(16 * 64, 0.0);
  const int out = p.connect(tape, tape.constant(zeros.data(), 16, 64));
  for (double v : tape.val(out)) EXPECT_EQ(v, 0.0);
}

TEST(netstack, velocity_shape_and_determinism) {
  const VelocityPolicy p = fresh_policy();
  Rng rng(7);
  std::vector<double> x(6 * 64);
  rng.fill_normal(x.data(), x.size());
  auto run = [&](int frames) {
    Tape tape(p.params, nullptr);
    const int xn = tape.constant(x.data(), frames, 64);
    const int v =
        p.velocity(tape, xn, p.condition_tokens(tape, nsp_tokens(2)), 0.5);
    EXPECT_EQ(tape.rows(v), frames);
    EXPECT_EQ(tape.cols(v), 64);
    return node_values(tape, v);
  };
  const auto v6 = run(6);
  EXPECT_EQ(v6, run(6));
  for (double v : v6) EXPECT_TRUE(std::isfinite(v));
  run(1);  // single-frame records reuse the same trunk

  Tape tape(p.params, nullptr);
  const int bad = tape.constant(x.data(), 8, 48);
  EXPECT_THROW(p.velocity(tape, bad, p.condition_null(tape), 0.5), ShapeError);
}

TEST(netstack, time_embedding_distinguishes_times) {
  const VelocityPolicy p = fresh_policy();
  Tape tape(p.params, nullptr);
  const auto e1 = node_values(tape, p.time_embedding(tape, 0.25));
  const auto e2 = node_values(tape, p.time_embedding(tape, 0.75));
  EXPECT_NE(e1, e2);
}

TEST(netstack, guidance_is_affine_in_scale) {
  const VelocityPolicy p = fresh_policy();
  Rng rng(9);
  std::vector<double> x(6 * 64);
  rng.fill_normal(x.data(), x.size());
  auto guided = [&](double s) {
    Tape tape(p.params, nullptr);
    const int xn = tape.constant(x.data(), 6, 64);
    const int cond = p.condition_tokens(tape, nsp_tokens(5));
    return node_values(tape, p.cfg_velocity(tape, xn, cond, 0.3, s));
  };
  auto plain_cond = [&]() {
    Tape tape(p.params, nullptr);
    const int xn = tape.constant(x.data(), 6, 64);
    return node_values(
        tape, p.velocity(tape, xn, p.condition_tokens(tape, nsp_tokens(5)), 0.3));
  };
  auto plain_null = [&]() {
    Tape tape(p.params, nullptr);
    const int xn = tape.constant(x.data(), 6, 64);
    return node_values(tape, p.velocity(tape, xn, p.condition_null(tape), 0.3));
  };
  EXPECT_EQ(guided(1.0), plain_cond());  // bit-identical single-path collapse
  EXPECT_EQ(guided(0.0), plain_null());
  const auto v0 = guided(0.0), v1 = guided(1.0), v3 = guided(3.0);
  for (size_t i = 0; i < v3.size(); ++i)
    EXPECT_NEAR(v3[i], v0[i] + 3.0 * (v1[i] - v0[i]), 1e-12);
}

TEST(netstack, gradients_reach_expected_segments) {
  const VelocityPolicy p = fresh_policy();
  std::vector<double> grad(p.param_count(), 0.0);
  Tape tape(p.params, &grad);
  std::vector<double> x(6 * 64, 0.3);
  const int xn = tape.constant(x.data(), 6, 64);
  const int v = p.velocity(tape, xn, p.condition_tokens(tape, nsp_tokens(1)), 0.4);
  tape.backward(tape.mean_sq(v));
  auto grad_norm = [&](const char* name) {
    const auto& s = p.segment(name);
    double n = 0.0;
    for (size_t i = 0; i < s.size; ++i) n += std::abs(grad[s.offset + i]);
    return n;
  };
  // Conditioned velocity touches every trainable segment except null_emb.
  for (const char* name :
       {"queries", "conn_w1", "conn_w2", "conn_rmsw", "conn_scale", "time_w",
        "time_b", "frame_tab", "trunk_w1", "trunk_b1", "trunk_w2", "trunk_b2",
        "trunk_w3", "trunk_b3"})
    EXPECT_GT(grad_norm(name), 0.0) << name;
  EXPECT_EQ(grad_norm("null_emb"), 0.0);
}

TEST(netstack, connector_mask_freezes_trunk) {
  const VelocityPolicy p = fresh_policy();
  const auto mask = p.connector_mask();
  std::vector<double> grad(p.param_count(), 0.0);
  Tape tape(p.params, &grad, &mask);
  std::vector<double> x(6 * 64, -0.2);
  const int xn = tape.constant(x.data(), 6, 64);
  const int v = p.velocity(tape, xn, p.condition_tokens(tape, nsp_tokens(4)), 0.6);
  tape.backward(tape.mean_sq(v));
  auto seg_abs = [&](const char* name) {
    const auto& s = p.segment(name);
    double n = 0.0;
    for (size_t i = 0; i < s.size; ++i) n += std::abs(grad[s.offset + i]);
    return n;
  };
  for (const char* frozen : {"time_w", "time_b", "frame_tab", "trunk_w1",
                             "trunk_b1", "trunk_w2", "trunk_b2", "trunk_w3",
                             "trunk_b3"})
    EXPECT_EQ(seg_abs(frozen), 0.0) << frozen;
  for (const char* live :
       {"queries", "conn_w1", "conn_w2", "conn_rmsw", "conn_scale"})
    EXPECT_GT(seg_abs(live), 0.0) << live;
}

TEST(netstack, pass_through_encoder_when_no_mixing_layers) {
  NetConfig cfg = desk_net();
  cfg.n_frozen = 0;
  VelocityPolicy p(cfg);
  p.init_params(2);
  Tape tape(p.params, nullptr);
  const auto& q = p.segment("queries");
  const int enc = p.encoder().encode(tape, nsp_tokens(0),
                                     tape.param(q.offset, 16, 64));
  const auto got = node_values(tape, enc);
  for (size_t i = 0; i < got.size(); ++i)
    EXPECT_EQ(got[i], p.params[q.offset + i]);
}

TEST(netstack, checkpoint_roundtrip_and_guards) {
  const std::string path = ::testing::TempDir() + "/policy.nspc";
  VelocityPolicy p = fresh_policy(21);
  save_checkpoint(p, path);

  VelocityPolicy q(desk_net());
  load_checkpoint(q, path);
  EXPECT_EQ(q.params, p.params);

  NetConfig other = desk_net();
  other.hidden = 48;
  VelocityPolicy r(other);
  EXPECT_THROW(load_checkpoint(r, path), CheckpointError);

  auto bytes = read_file(path);
  bytes.resize(bytes.size() / 2);
  write_file(path, bytes);
  EXPECT_THROW(load_checkpoint(q, path), CheckpointError);
  EXPECT_THROW(load_checkpoint(q, path + ".missing"), CheckpointError);
}
