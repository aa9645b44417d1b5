#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nspforge/autodiff.hpp"
#include "nspforge/config.hpp"
#include "nspforge/errors.hpp"
#include "nspforge/io.hpp"
#include "nspforge/rng.hpp"

namespace nspforge {

// Shapes of the conditioning and velocity networks. vocab/frames/frame_size
// come from the world the net is built for; everything else from config.
struct NetConfig {
  int d_enc = 64;
  int d_mid = 128;
  int d_cond = 32;
  int queries = 16;
  int d_time = 32;
  int d_frame = 32;
  int hidden = 96;
  int n_frozen = 1;
  int l_max = 32;
  double eps_norm = 1e-6;
  double cond_dropout = 0.1;
  uint64_t encoder_seed = 0x5eed;
  int vocab = 10;
  int frames = 6;
  int frame_size = 64;

  static NetConfig from_config(const Config& c, int vocab, int frames,
                               int frame_size) {
    NetConfig n;
    n.d_enc = c.net_d_enc;
    n.d_mid = c.net_d_mid;
    n.d_cond = c.net_d_cond;
    n.queries = c.net_queries;
    n.d_time = c.net_d_time;
    n.d_frame = c.net_d_frame;
    n.hidden = c.net_hidden;
    n.n_frozen = c.net_n_frozen;
    n.l_max = c.net_l_max;
    n.eps_norm = c.net_eps_norm;
    n.cond_dropout = c.net_cond_dropout;
    n.encoder_seed = c.resolved_encoder_seed();
    n.vocab = vocab;
    n.frames = frames;
    n.frame_size = frame_size;
    n.validate();
    return n;
  }

  int trunk_in() const { return frame_size + d_cond + d_time + d_frame; }

  void validate() const {
    auto require = [](bool ok, const char* what) {
      if (!ok) throw ConfigError(what);
    };
    require(d_enc >= 1 && d_mid >= 1 && d_cond >= 1 && queries >= 1 &&
                d_time >= 1 && d_frame >= 1 && hidden >= 1,
            "net dims must be >= 1");
    require(d_time % 2 == 0, "net.d_time must be even (sin/cos pairs)");
    require(n_frozen >= 0, "net.n_frozen must be >= 0");
    require(l_max >= queries + 2, "net.l_max too small for prompt + queries");
    require(eps_norm > 0.0, "net.eps_norm must be > 0");
    require(cond_dropout >= 0.0 && cond_dropout < 1.0,
            "net.cond_dropout must lie in [0, 1)");
    require(vocab >= 3 && frames >= 1 && frame_size >= 1,
            "net world shape must be positive");
  }
};

// Architecture fingerprint; checkpoints refuse to load into a different
// shape. Run-level knobs (learning rates, paths) deliberately excluded.
inline uint64_t signature(const NetConfig& c) {
  std::string s;
  for (int v : {c.d_enc, c.d_mid, c.d_cond, c.queries, c.d_time, c.d_frame,
                c.hidden, c.n_frozen, c.l_max, c.vocab, c.frames, c.frame_size})
    s += std::to_string(v) + "|";
  s += std::to_string(c.eps_norm) + "|" + std::to_string(c.encoder_seed);
  return fnv1a(s);
}

// Token mixer with weights fixed at construction: an embedding table plus
// n_frozen rounds of residual single-head self-attention and a residual
// tanh affine. Learnable query rows ride along as extra sequence positions,
// so gradients flow through the fixed weights into the queries while the
// weights themselves stay constants on every tape.
class FrozenEncoder {
 public:
  explicit FrozenEncoder(const NetConfig& cfg) : cfg_(cfg) {
    const int d = cfg_.d_enc;
    Rng rng(derive(cfg_.encoder_seed, 0xe0c0));
    embed_.resize(static_cast<size_t>(cfg_.vocab) * d);
    rng.fill_normal(embed_.data(), embed_.size());
    const double w_scale = 1.0 / std::sqrt(static_cast<double>(d));
    layers_.resize(cfg_.n_frozen);
    for (auto& l : layers_) {
      for (auto* m : {&l.wq, &l.wk, &l.wv, &l.wo, &l.wf}) {
        m->resize(static_cast<size_t>(d) * d);
        rng.fill_normal(m->data(), m->size());
        for (double& v : *m) v *= w_scale;
      }
      l.bf.assign(d, 0.0);
    }
  }

  const NetConfig& config() const { return cfg_; }

  // Embeds tokens, appends the query rows, mixes, and returns the last
  // queries() rows. 'queries' must be a (queries x d_enc) node on 'tape'.
  int encode(Tape& tape, const std::vector<uint32_t>& tokens,
             int queries) const {
    const int d = cfg_.d_enc;
    const int n = static_cast<int>(tokens.size());
    if (n < 1) throw TokenError("encode: empty token sequence");
    if (n + cfg_.queries > cfg_.l_max)
      throw TokenError("encode: sequence exceeds l_max");
    for (uint32_t t : tokens)
      if (t >= static_cast<uint32_t>(cfg_.vocab))
        throw TokenError("encode: token id " + std::to_string(t) +
                         " outside vocab");
    std::vector<double> emb(static_cast<size_t>(n) * d);
    for (int i = 0; i < n; ++i)
      std::copy_n(embed_.data() + static_cast<size_t>(tokens[i]) * d, d,
                  emb.data() + static_cast<size_t>(i) * d);
    int x = tape.concat_rows(tape.constant(emb.data(), n, d), queries);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    for (const auto& l : layers_) {
      const int wq = tape.constant(l.wq.data(), d, d);
      const int wk = tape.constant(l.wk.data(), d, d);
      const int wv = tape.constant(l.wv.data(), d, d);
      const int wo = tape.constant(l.wo.data(), d, d);
      const int scores = tape.scale(
          tape.matmul(tape.matmul(x, wq), tape.matmul(x, wk), false, true),
          inv_sqrt_d);
      const int mixed = tape.matmul(
          tape.matmul(tape.softmax_rows(scores), tape.matmul(x, wv)), wo);
      x = tape.lin(x, mixed, 1.0, 1.0);
      const int ff = tape.tanh_(tape.add_rowvec(
          tape.matmul(x, tape.constant(l.wf.data(), d, d)),
          tape.constant(l.bf.data(), 1, d)));
      x = tape.lin(x, ff, 1.0, 1.0);
    }
    return tape.slice_rows(x, n, cfg_.queries);
  }

 private:
  struct Layer {
    std::vector<double> wq, wk, wv, wo, wf, bf;
  };
  NetConfig cfg_;
  std::vector<double> embed_;
  std::vector<Layer> layers_;
};

// The trainable model: a flat parameter vector with named segments, plus
// tape builders for conditioning and velocity prediction. Segment order is
// part of the checkpoint format — do not reorder.
class VelocityPolicy {
 public:
  struct Segment {
    std::string name;
    size_t offset;
    size_t size;
  };

  explicit VelocityPolicy(const NetConfig& cfg) : cfg_(cfg), encoder_(cfg) {
    size_t off = 0;
    auto seg = [&](const char* name, size_t n) {
      segments_.push_back({name, off, n});
      off += n;
    };
    const size_t fs = cfg_.frame_size, hid = cfg_.hidden;
    seg("queries", static_cast<size_t>(cfg_.queries) * cfg_.d_enc);
    seg("conn_w1", static_cast<size_t>(cfg_.d_enc) * cfg_.d_mid);
    seg("conn_w2", static_cast<size_t>(cfg_.d_mid) * cfg_.d_cond);
    seg("conn_rmsw", static_cast<size_t>(cfg_.d_cond));
    seg("conn_scale", 1);
    seg("null_emb", static_cast<size_t>(cfg_.d_cond));
    seg("time_w", static_cast<size_t>(cfg_.d_time) * cfg_.d_time);
    seg("time_b", static_cast<size_t>(cfg_.d_time));
    seg("frame_tab", static_cast<size_t>(cfg_.frames) * cfg_.d_frame);
    seg("trunk_w1", static_cast<size_t>(cfg_.trunk_in()) * hid);
    seg("trunk_b1", hid);
    seg("trunk_w2", hid * hid);
    seg("trunk_b2", hid);
    seg("trunk_w3", hid * fs);
    seg("trunk_b3", fs);
    params.assign(off, 0.0);
  }

  const NetConfig& config() const { return cfg_; }
  const FrozenEncoder& encoder() const { return encoder_; }
  size_t param_count() const { return params.size(); }
  const std::vector<Segment>& segments() const { return segments_; }

  const Segment& segment(const std::string& name) const {
    for (const auto& s : segments_)
      if (s.name == name) return s;
    throw ProtocolError("unknown parameter segment: " + name);
  }

  // Gaussian fan-in init for weights; norm gain, output scale, null
  // embedding, and biases get fixed starts. The small conn_scale start keeps
  // conditioning nearly silent until training wakes it up.
  void init_params(uint64_t seed) {
    Rng rng(derive(seed, 0x1417));
    auto gauss = [&](const char* name, double scale) {
      const Segment& s = segment(name);
      rng.fill_normal(params.data() + s.offset, s.size);
      for (size_t i = 0; i < s.size; ++i) params[s.offset + i] *= scale;
    };
    auto fill = [&](const char* name, double v) {
      const Segment& s = segment(name);
      std::fill_n(params.data() + s.offset, s.size, v);
    };
    gauss("queries", 1.0 / std::sqrt(static_cast<double>(cfg_.d_enc)));
    gauss("conn_w1", 1.0 / std::sqrt(static_cast<double>(cfg_.d_enc)));
    gauss("conn_w2", 1.0 / std::sqrt(static_cast<double>(cfg_.d_mid)));
    fill("conn_rmsw", std::sqrt(5.5));
    fill("conn_scale", 0.01);
    fill("null_emb", 0.0);
    gauss("time_w", 1.0 / std::sqrt(static_cast<double>(cfg_.d_time)));
    fill("time_b", 0.0);
    gauss("frame_tab", 1.0);
    gauss("trunk_w1", 1.0 / std::sqrt(static_cast<double>(cfg_.trunk_in())));
    fill("trunk_b1", 0.0);
    gauss("trunk_w2", 1.0 / std::sqrt(static_cast<double>(cfg_.hidden)));
    fill("trunk_b2", 0.0);
    gauss("trunk_w3", 1.0 / std::sqrt(static_cast<double>(cfg_.hidden)));
    fill("trunk_b3", 0.0);
  }

  std::vector<uint8_t> full_mask() const {
    return std::vector<uint8_t>(params.size(), 1);
  }

  // Stage-1 mask: the conditioning pathway only. The velocity trunk, time
  // embedding, and frame table stay bit-frozen.
  std::vector<uint8_t> connector_mask() const {
    std::vector<uint8_t> m(params.size(), 0);
    for (const char* name : {"queries", "conn_w1", "conn_w2", "conn_rmsw",
                             "conn_scale", "null_emb"}) {
      const Segment& s = segment(name);
      std::fill_n(m.begin() + static_cast<long>(s.offset), s.size, 1);
    }
    return m;
  }

  // Pooled condition from a prompt: frozen mixer -> two-layer connector ->
  // rms norm -> learned output scale -> mean over query rows. (1 x d_cond)
  int condition_tokens(Tape& tape, const std::vector<uint32_t>& tokens) const {
    const Segment& q = segment("queries");
    const int queries =
        tape.param(q.offset, cfg_.queries, cfg_.d_enc);
    const int enc = encoder_.encode(tape, tokens, queries);
    return tape.mean_rows(connect(tape, enc));
  }

  // The trainable stand-in used when the condition is dropped or for the
  // unconditional branch of guidance. (1 x d_cond)
  int condition_null(Tape& tape) const {
    const Segment& s = segment("null_emb");
    return tape.param(s.offset, 1, cfg_.d_cond);
  }

  // Connector body, exposed for direct testing: rows of d_enc -> d_cond.
  int connect(Tape& tape, int enc) const {
    if (tape.cols(enc) != cfg_.d_enc)
      throw ShapeError("connect: input must have d_enc columns");
    const int w1 = tape.param(segment("conn_w1").offset, cfg_.d_enc, cfg_.d_mid);
    const int w2 = tape.param(segment("conn_w2").offset, cfg_.d_mid, cfg_.d_cond);
    const int rmsw = tape.param(segment("conn_rmsw").offset, 1, cfg_.d_cond);
    const int out_scale = tape.param(segment("conn_scale").offset, 1, 1);
    const int h = tape.matmul(tape.silu(tape.matmul(enc, w1)), w2);
    return tape.scale_by(tape.rmsnorm_rows(h, rmsw, cfg_.eps_norm), out_scale);
  }

  // Sin/cos features of t at integer multiples of 2*pi, then a learned
  // affine map. (1 x d_time)
  int time_embedding(Tape& tape, double t) const {
    std::vector<double> feat(cfg_.d_time);
    for (int k = 0; k < cfg_.d_time / 2; ++k) {
      const double w = 2.0 * M_PI * (k + 1);
      feat[2 * k] = std::sin(w * t);
      feat[2 * k + 1] = std::cos(w * t);
    }
    const int tw = tape.param(segment("time_w").offset, cfg_.d_time, cfg_.d_time);
    const int tb = tape.param(segment("time_b").offset, 1, cfg_.d_time);
    return tape.add_rowvec(
        tape.matmul(tape.constant(feat.data(), 1, cfg_.d_time), tw), tb);
  }

  // Predicted velocity for a noisy sample x (frames x frame_size) with the
  // given pooled condition at time t. Single-frame inputs use frame row 0.
  int velocity(Tape& tape, int x, int cond, double t) const {
    const int n_frames = tape.rows(x);
    if (tape.cols(x) != cfg_.frame_size)
      throw ShapeError("velocity: x must have frame_size columns");
    if (n_frames < 1 || n_frames > cfg_.frames)
      throw ShapeError("velocity: frame count outside [1, frames]");
    if (tape.rows(cond) != 1 || tape.cols(cond) != cfg_.d_cond)
      throw ShapeError("velocity: cond must be 1 x d_cond");

    const std::vector<int> bcast(n_frames, 0);
    std::vector<int> fmap(n_frames);
    for (int f = 0; f < n_frames; ++f) fmap[f] = f;
    const int ftab =
        tape.param(segment("frame_tab").offset, cfg_.frames, cfg_.d_frame);
    const int in = tape.concat_cols(
        tape.concat_cols(x, tape.gather_rows(cond, bcast)),
        tape.concat_cols(tape.gather_rows(time_embedding(tape, t), bcast),
                         tape.gather_rows(ftab, fmap)));

    const int w1 = tape.param(segment("trunk_w1").offset, cfg_.trunk_in(), cfg_.hidden);
    const int b1 = tape.param(segment("trunk_b1").offset, 1, cfg_.hidden);
    const int w2 = tape.param(segment("trunk_w2").offset, cfg_.hidden, cfg_.hidden);
    const int b2 = tape.param(segment("trunk_b2").offset, 1, cfg_.hidden);
    const int w3 = tape.param(segment("trunk_w3").offset, cfg_.hidden, cfg_.frame_size);
    const int b3 = tape.param(segment("trunk_b3").offset, 1, cfg_.frame_size);
    const int h1 = tape.silu(tape.add_rowvec(tape.matmul(in, w1), b1));
    const int h2 = tape.silu(tape.add_rowvec(tape.matmul(h1, w2), b2));
    return tape.add_rowvec(tape.matmul(h2, w3), b3);
  }

  // Guided velocity: v_null + s * (v_cond - v_null), built as a single lin
  // node. s = 1 and s = 0 collapse to one unconditional/conditional pass so
  // the ungated paths stay bit-identical to plain velocity().
  int cfg_velocity(Tape& tape, int x, int cond, double t, double s) const {
    if (s == 1.0) return velocity(tape, x, cond, t);
    if (s == 0.0) return velocity(tape, x, condition_null(tape), t);
    const int v_null = velocity(tape, x, condition_null(tape), t);
    const int v_cond = velocity(tape, x, cond, t);
    return tape.lin(v_null, v_cond, 1.0 - s, s);
  }

 private:
  NetConfig cfg_;
  FrozenEncoder encoder_;
  std::vector<Segment> segments_;

 public:
  std::vector<double> params;
};

// ---- Checkpoints -----------------------------------------------------------
// Layout: magic "NSPC", version u32, architecture signature u64, param count
// u64, params f64[]. Loading into a different architecture is an error, not
// a best-effort cast.

constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const VelocityPolicy& p, const std::string& path) {
  ByteSink sink;
  sink.put_bytes("NSPC", 4);
  sink.put<uint32_t>(kCheckpointVersion);
  sink.put<uint64_t>(signature(p.config()));
  sink.put<uint64_t>(p.params.size());
  for (double v : p.params) sink.put<double>(v);
  try {
    write_file(path, sink.bytes);
  } catch (const IoError& e) {
    throw CheckpointError(e.what());
  }
}

inline void load_checkpoint(VelocityPolicy& p, const std::string& path) {
  std::vector<char> bytes;
  try {
    bytes = read_file(path);
  } catch (const IoError& e) {
    throw CheckpointError(e.what());
  }
  try {
    ByteSource src(bytes.data(), bytes.size());
    char magic[4];
    src.get_bytes(magic, 4);
    if (std::string(magic, 4) != "NSPC")
      throw CheckpointError("bad magic in " + path);
    if (src.get<uint32_t>() != kCheckpointVersion)
      throw CheckpointError("unsupported checkpoint version in " + path);
    if (src.get<uint64_t>() != signature(p.config()))
      throw CheckpointError(path + ": architecture signature mismatch");
    const uint64_t n = src.get<uint64_t>();
    if (n != p.params.size())
      throw CheckpointError(path + ": parameter count mismatch");
    for (auto& v : p.params) v = src.get<double>();
  } catch (const DatasetError& e) {
    throw CheckpointError("truncated checkpoint " + path + ": " + e.what());
  }
  for (double v : p.params)
    if (!std::isfinite(v))
      throw CheckpointError(path + ": non-finite parameter");
}

}  // namespace nspforge
