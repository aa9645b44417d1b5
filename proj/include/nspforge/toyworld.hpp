#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "nspforge/errors.hpp"
#include "nspforge/io.hpp"
#include "nspforge/latent.hpp"
#include "nspforge/rng.hpp"

namespace nspforge {

// Token vocabulary: two instruction-mode tokens followed by one token per
// scene class. Sequences are [mode, class].
constexpr uint32_t kTokenT2V = 0;  // "generate a video for this caption"
constexpr uint32_t kTokenNSP = 1;  // "generate what happens after this scene"
inline uint32_t class_token(int c) { return 2 + static_cast<uint32_t>(c); }

enum class Split : int {
  pretrain_img = 0,
  pretrain_mix = 1,
  pretrain_vid = 2,
  sft = 3,
  rl = 4,
  test = 5,
};
constexpr int kSplitCount = 6;
inline const char* split_name(Split s) {
  static const char* names[] = {"pretrain_img", "pretrain_mix", "pretrain_vid",
                                "sft",          "rl",           "test"};
  return names[static_cast<int>(s)];
}

// The synthetic scene universe: K classes, each a deterministic latent-video
// prototype, linked by a fixed-point-free successor permutation. Rendering
// adds isotropic Gaussian noise of scale sigma_render.
struct World {
  int classes = 0, frames = 0, height = 0, width = 0;
  uint64_t seed = 0;
  double sigma_render = 0.05;
  std::vector<int> successor;    // derangement: successor[c] != c
  std::vector<int> predecessor;  // inverse permutation
  std::vector<LatentVideo> prototypes;

  int vocab() const { return classes + 2; }
  const LatentVideo& prototype(int c) const { return prototypes[c]; }
};

// A curated sample: instruction tokens, the class named by those tokens, the
// class of the target video, and the target video itself (f32 storage).
// Invariant: nearest prototype of the video is successor_id, never class_id.
struct SceneRecord {
  std::vector<uint32_t> tokens;
  uint32_t class_id = 0;
  uint32_t successor_id = 0;
  int t = 0, h = 0, w = 0;
  std::vector<float> latent;
  uint64_t noise_seed = 0;  // render stream id; not serialized

  LatentVideo video() const {
    LatentVideo v(t, h, w);
    for (size_t i = 0; i < latent.size(); ++i) v.data[i] = latent[i];
    return v;
  }
  static SceneRecord from_video(const LatentVideo& v) {
    SceneRecord r;
    r.t = v.t;
    r.h = v.h;
    r.w = v.w;
    r.latent.assign(v.data.begin(), v.data.end());
    return r;
  }
};

inline std::vector<uint32_t> t2v_tokens(int c) { return {kTokenT2V, class_token(c)}; }
inline std::vector<uint32_t> nsp_tokens(int c) { return {kTokenNSP, class_token(c)}; }

// Class named by a [mode, class] sequence.
inline int token_class(const std::vector<uint32_t>& tokens) {
  if (tokens.size() != 2 || tokens[0] > 1 || tokens[1] < 2)
    throw TokenError("expected [mode, class] token sequence");
  return static_cast<int>(tokens[1] - 2);
}

// Prototypes: frame f of class c is cos(w_c f + p_c) A_c + sin(w_c f + p_c) B_c
// with unit-scale Gaussian fields A, B — frames follow a deterministic
// temporal progression, so frame order is informative. Prototype distance is
// re-rolled (salted) in the vanishingly unlikely event two classes land
// within 4 sigma_render of each other, keeping the distinguishability
// invariant unconditional.
inline World build_world(int classes, int frames, int height, int width,
                         uint64_t seed, double sigma_render = 0.05) {
  if (classes < 3)
    throw ConfigError("world needs >= 3 classes for a non-trivial derangement");
  if (frames < 2) throw ConfigError("world needs >= 2 frames");
  if (height < 1 || width < 1) throw ConfigError("world dims must be positive");
  if (!(sigma_render >= 0.0)) throw ConfigError("sigma_render must be >= 0");

  World w;
  w.classes = classes;
  w.frames = frames;
  w.height = height;
  w.width = width;
  w.seed = seed;
  w.sigma_render = sigma_render;

  // Derangement by rejection; deterministic given the seed.
  Rng perm_rng(derive(seed, 0x5ecc));
  for (;;) {
    auto p = perm_rng.permutation(classes);
    bool fixed_point = false;
    for (int c = 0; c < classes; ++c)
      if (static_cast<int>(p[c]) == c) fixed_point = true;
    if (fixed_point) continue;
    w.successor.assign(p.begin(), p.end());
    break;
  }
  w.predecessor.assign(classes, 0);
  for (int c = 0; c < classes; ++c) w.predecessor[w.successor[c]] = c;

  const double min_dist = 4.0 * sigma_render;
  for (uint64_t salt = 0;; ++salt) {
    w.prototypes.clear();
    w.prototypes.reserve(classes);
    for (int c = 0; c < classes; ++c) {
      Rng rng(derive(seed, 0x9a0f, salt, c));
      const double omega = rng.uniform(0.5, 1.5);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      std::vector<double> a(static_cast<size_t>(height) * width);
      std::vector<double> b(a.size());
      for (auto& v : a) v = rng.normal();
      for (auto& v : b) v = rng.normal();
      LatentVideo proto(frames, height, width);
      for (int f = 0; f < frames; ++f) {
        const double ca = std::cos(omega * f + phase);
        const double sb = std::sin(omega * f + phase);
        double* dst = proto.frame(f);
        for (size_t i = 0; i < a.size(); ++i) dst[i] = ca * a[i] + sb * b[i];
      }
      w.prototypes.push_back(std::move(proto));
    }
    // Distinguishability must hold for full videos and for first frames
    // (single-frame records are classified against frame 0).
    bool ok = true;
    for (int i = 0; i < classes && ok; ++i) {
      for (int j = i + 1; j < classes && ok; ++j) {
        const double dv =
            std::sqrt(squared_distance(w.prototypes[i], w.prototypes[j]));
        double df0 = 0.0;
        for (size_t p = 0; p < w.prototypes[i].frame_size(); ++p) {
          const double d = w.prototypes[i].frame(0)[p] - w.prototypes[j].frame(0)[p];
          df0 += d * d;
        }
        if (dv <= min_dist || std::sqrt(df0) <= min_dist) ok = false;
      }
    }
    if (ok) break;
  }
  return w;
}

// Prototype plus i.i.d. Gaussian perturbation of scale sigma_render.
inline LatentVideo render(int class_id, const World& w, Rng& rng) {
  if (class_id < 0 || class_id >= w.classes)
    throw DomainError("render: class id out of range");
  LatentVideo v = w.prototypes[class_id];
  for (auto& x : v.data) x += w.sigma_render * rng.normal();
  return v;
}

// Single-frame render: frame 0 of the prototype, same noise model.
inline LatentVideo render_image(int class_id, const World& w, Rng& rng) {
  if (class_id < 0 || class_id >= w.classes)
    throw DomainError("render_image: class id out of range");
  LatentVideo v(1, w.height, w.width);
  const double* src = w.prototypes[class_id].frame(0);
  for (size_t i = 0; i < v.numel(); ++i)
    v.data[i] = src[i] + w.sigma_render * rng.normal();
  return v;
}

// Nearest prototype by Euclidean distance; single-frame inputs compare
// against prototype frame 0. Ties break toward the lowest class id. Returns
// (class, margin) with margin = second_best - best in distance units.
inline std::pair<int, double> nearest_class(const LatentVideo& v,
                                            const World& w) {
  if (v.h != w.height || v.w != w.width || (v.t != w.frames && v.t != 1))
    throw ShapeError("nearest_class: video shape does not match world");
  double best = std::numeric_limits<double>::infinity();
  double second = std::numeric_limits<double>::infinity();
  int best_c = 0;
  for (int c = 0; c < w.classes; ++c) {
    double d2 = 0.0;
    if (v.t == w.frames) {
      d2 = squared_distance(v, w.prototypes[c]);
    } else {
      const double* p = w.prototypes[c].frame(0);
      for (size_t i = 0; i < v.numel(); ++i) {
        const double d = v.data[i] - p[i];
        d2 += d * d;
      }
    }
    const double dist = std::sqrt(d2);
    if (dist < best) {  // strict: ties keep the lowest class id
      second = best;
      best = dist;
      best_c = c;
    } else if (dist < second) {
      second = dist;
    }
  }
  return {best_c, second - best};
}

// Token encoding of the class whose successor is record_successor; with
// probability corruption_p a deliberately wrong class is emitted instead.
inline std::pair<std::vector<uint32_t>, int> generate_preceding(
    int record_successor, const World& w, Rng& rng, double corruption_p) {
  if (!(corruption_p >= 0.0 && corruption_p <= 1.0))
    throw DomainError("corruption_p must lie in [0, 1]");
  const int truth = w.predecessor[record_successor];
  int c = truth;
  if (corruption_p > 0.0 && rng.uniform() < corruption_p) {
    // Wrong on purpose: uniform over the other classes.
    const int shift = 1 + static_cast<int>(rng.below(w.classes - 1));
    c = (truth + shift) % w.classes;
  }
  return {nsp_tokens(c), c};
}

struct CurationStats {
  long generated = 0;   // candidate verifications attempted
  long accepted = 0;
  long discarded = 0;
  long regenerations = 0;
};

// Verification per the curation rule: (a) causal consistency — the encoded
// class's successor matches the class of next_video; (b) non-redundancy —
// the encoded class differs from the video's class. On failure the preceding
// description is regenerated, up to max_attempts total attempts, then the
// candidate is discarded (a normal outcome, counted in stats).
inline std::optional<SceneRecord> verify_and_curate(SceneRecord candidate,
                                                    const World& w, Rng& rng,
                                                    double corruption_p,
                                                    CurationStats* stats,
                                                    int max_attempts = 3) {
  const int video_class = nearest_class(candidate.video(), w).first;
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    if (stats) stats->generated++;
    const int encoded = token_class(candidate.tokens);
    const bool causal = w.successor[encoded] == video_class;
    const bool non_redundant = encoded != video_class;
    if (causal && non_redundant) {
      if (stats) stats->accepted++;
      return candidate;
    }
    if (attempt == max_attempts) break;
    auto [tokens, class_id] = generate_preceding(video_class, w, rng, corruption_p);
    candidate.tokens = std::move(tokens);
    candidate.class_id = static_cast<uint32_t>(class_id);
    if (stats) stats->regenerations++;
  }
  if (stats) stats->discarded++;
  return std::nullopt;
}

struct DatasetSizes {
  int pretrain_img = 20000;
  int pretrain_mix = 8000;
  int pretrain_vid = 6000;
  int sft = 1000;
  int rl = 512;
  int test = 200;

  int of(Split s) const {
    switch (s) {
      case Split::pretrain_img: return pretrain_img;
      case Split::pretrain_mix: return pretrain_mix;
      case Split::pretrain_vid: return pretrain_vid;
      case Split::sft: return sft;
      case Split::rl: return rl;
      case Split::test: return test;
    }
    return 0;
  }
};

struct Dataset {
  int classes = 0, frames = 0, height = 0, width = 0;
  uint64_t world_seed = 0;
  std::array<std::vector<SceneRecord>, kSplitCount> splits;

  const std::vector<SceneRecord>& split(Split s) const {
    return splits[static_cast<int>(s)];
  }
  std::vector<SceneRecord>& split(Split s) {
    return splits[static_cast<int>(s)];
  }
};

namespace detail {

// Caption-mode record: tokens name the video's own class X; class_id is kept
// at X's predecessor so the record invariant (video class == successor_id !=
// class_id) holds uniformly across instruction modes.
inline SceneRecord make_t2v_record(const World& w, uint64_t stream, bool image,
                                   bool mixed_coin) {
  Rng rng(stream);
  const int cls = static_cast<int>(rng.below(w.classes));
  bool single = image;
  if (mixed_coin) single = rng.uniform() < 0.5;
  SceneRecord r = SceneRecord::from_video(single ? render_image(cls, w, rng)
                                                 : render(cls, w, rng));
  r.tokens = t2v_tokens(cls);
  r.successor_id = static_cast<uint32_t>(cls);
  r.class_id = static_cast<uint32_t>(w.predecessor[cls]);
  r.noise_seed = stream;
  return r;
}

// NSP candidate: render the successor video first, then ask for a preceding
// description and push it through curation.
inline std::optional<SceneRecord> make_nsp_record(const World& w,
                                                  uint64_t stream,
                                                  double corruption_p,
                                                  int max_attempts,
                                                  CurationStats* stats) {
  Rng rng(stream);
  const int scene = static_cast<int>(rng.below(w.classes));
  const int video_class = w.successor[scene];
  SceneRecord r = SceneRecord::from_video(render(video_class, w, rng));
  r.successor_id = static_cast<uint32_t>(video_class);
  r.noise_seed = stream;
  auto [tokens, class_id] = generate_preceding(video_class, w, rng, corruption_p);
  r.tokens = std::move(tokens);
  r.class_id = static_cast<uint32_t>(class_id);
  return verify_and_curate(std::move(r), w, rng, corruption_p, stats,
                           max_attempts);
}

}  // namespace detail

// Builds all six splits. Records draw from per-record streams derived from
// (seed, split, counter), so content is independent of generation schedule;
// discarded NSP candidates are replaced (fresh counter) until each split
// reaches its configured size. Train/test hygiene is enforced by dedup on
// (class_id, noise_seed).
inline Dataset build_dataset(const World& w, const DatasetSizes& sizes,
                             uint64_t seed, double corruption_p,
                             CurationStats* stats_out = nullptr,
                             int max_attempts = 3) {
  for (int i = 0; i < kSplitCount; ++i)
    if (sizes.of(static_cast<Split>(i)) < 1)
      throw ConfigError("every split size must be >= 1");

  Dataset ds;
  ds.classes = w.classes;
  ds.frames = w.frames;
  ds.height = w.height;
  ds.width = w.width;
  ds.world_seed = w.seed;

  CurationStats stats;
  std::set<std::pair<uint32_t, uint64_t>> seen;

  for (int si = 0; si < kSplitCount; ++si) {
    const Split sp = static_cast<Split>(si);
    const int want = sizes.of(sp);
    auto& out = ds.splits[si];
    out.reserve(want);
    uint64_t counter = 0;
    while (static_cast<int>(out.size()) < want) {
      const uint64_t stream = derive(seed, 0xda7a, si, counter++);
      std::optional<SceneRecord> rec;
      switch (sp) {
        case Split::pretrain_img:
          rec = detail::make_t2v_record(w, stream, true, false);
          break;
        case Split::pretrain_mix:
          rec = detail::make_t2v_record(w, stream, false, true);
          break;
        case Split::pretrain_vid:
          rec = detail::make_t2v_record(w, stream, false, false);
          break;
        case Split::sft:
        case Split::rl:
        case Split::test:
          rec = detail::make_nsp_record(w, stream, corruption_p, max_attempts,
                                        &stats);
          break;
      }
      if (!rec) continue;
      if (!seen.insert({rec->class_id, rec->noise_seed}).second) continue;
      out.push_back(std::move(*rec));
    }
  }
  if (stats_out) *stats_out = stats;
  return ds;
}

// ---- Serialization -------------------------------------------------------
// Binary layout: magic "NSPD", version u32, K u32, T u32, H u32, W u32,
// world seed u64, split count u32, then per split {name, offset u64,
// count u32}; records follow, each: class_id u32, successor_id u32,
// token count u32, tokens u32[], shape u32[3], latent f32[]. A text index
// "<split>/<index> <offset>" accompanies the binary at <path>.idx.

constexpr uint32_t kDatasetVersion = 1;

inline void save_dataset(const Dataset& ds, const std::string& path) {
  ByteSink sink;
  sink.put_bytes("NSPD", 4);
  sink.put<uint32_t>(kDatasetVersion);
  sink.put<uint32_t>(static_cast<uint32_t>(ds.classes));
  sink.put<uint32_t>(static_cast<uint32_t>(ds.frames));
  sink.put<uint32_t>(static_cast<uint32_t>(ds.height));
  sink.put<uint32_t>(static_cast<uint32_t>(ds.width));
  sink.put<uint64_t>(ds.world_seed);
  sink.put<uint32_t>(kSplitCount);
  std::vector<size_t> offset_slots;
  for (int si = 0; si < kSplitCount; ++si) {
    sink.put_string(split_name(static_cast<Split>(si)));
    offset_slots.push_back(sink.bytes.size());
    sink.put<uint64_t>(0);  // patched below
    sink.put<uint32_t>(static_cast<uint32_t>(ds.splits[si].size()));
  }
  std::string index;
  char line[64];
  for (int si = 0; si < kSplitCount; ++si) {
    sink.patch<uint64_t>(offset_slots[si], sink.bytes.size());
    for (size_t i = 0; i < ds.splits[si].size(); ++i) {
      const SceneRecord& r = ds.splits[si][i];
      std::snprintf(line, sizeof(line), "%s/%06zu %zu\n",
                    split_name(static_cast<Split>(si)), i, sink.bytes.size());
      index += line;
      sink.put<uint32_t>(r.class_id);
      sink.put<uint32_t>(r.successor_id);
      sink.put<uint32_t>(static_cast<uint32_t>(r.tokens.size()));
      for (uint32_t tok : r.tokens) sink.put<uint32_t>(tok);
      sink.put<uint32_t>(static_cast<uint32_t>(r.t));
      sink.put<uint32_t>(static_cast<uint32_t>(r.h));
      sink.put<uint32_t>(static_cast<uint32_t>(r.w));
      for (float f : r.latent) sink.put<float>(f);
    }
  }
  write_file(path, sink.bytes, "dataset");
  write_file(path + ".idx", {index.begin(), index.end()}, "dataset");
}

inline Dataset load_dataset(const std::string& path) {
  std::vector<char> bytes;
  try {
    bytes = read_file(path);
  } catch (const IoError& e) {
    throw DatasetError(e.what());
  }
  ByteSource src(bytes.data(), bytes.size());
  char magic[4];
  src.get_bytes(magic, 4);
  if (std::string(magic, 4) != "NSPD")
    throw DatasetError("bad magic in " + path);
  const auto version = src.get<uint32_t>();
  if (version != kDatasetVersion)
    throw DatasetError("unsupported dataset version " + std::to_string(version));
  Dataset ds;
  ds.classes = static_cast<int>(src.get<uint32_t>());
  ds.frames = static_cast<int>(src.get<uint32_t>());
  ds.height = static_cast<int>(src.get<uint32_t>());
  ds.width = static_cast<int>(src.get<uint32_t>());
  ds.world_seed = src.get<uint64_t>();
  const auto nsplits = src.get<uint32_t>();
  if (nsplits != kSplitCount)
    throw DatasetError("expected " + std::to_string(kSplitCount) + " splits");
  struct Entry {
    uint64_t offset;
    uint32_t count;
  };
  std::vector<Entry> entries;
  for (uint32_t si = 0; si < nsplits; ++si) {
    const std::string name = src.get_string();
    if (name != split_name(static_cast<Split>(si)))
      throw DatasetError("unexpected split name: " + name);
    Entry e;
    e.offset = src.get<uint64_t>();
    e.count = src.get<uint32_t>();
    entries.push_back(e);
  }
  for (uint32_t si = 0; si < nsplits; ++si) {
    src.seek(entries[si].offset);
    auto& out = ds.splits[si];
    out.reserve(entries[si].count);
    for (uint32_t i = 0; i < entries[si].count; ++i) {
      SceneRecord r;
      r.class_id = src.get<uint32_t>();
      r.successor_id = src.get<uint32_t>();
      const auto ntok = src.get<uint32_t>();
      if (ntok > 64) throw DatasetError("implausible token count");
      r.tokens.resize(ntok);
      for (auto& tok : r.tokens) tok = src.get<uint32_t>();
      r.t = static_cast<int>(src.get<uint32_t>());
      r.h = static_cast<int>(src.get<uint32_t>());
      r.w = static_cast<int>(src.get<uint32_t>());
      if (r.t < 1 || r.h < 1 || r.w < 1 || r.t > 4096 || r.h > 4096 ||
          r.w > 4096)
        throw DatasetError("implausible record shape");
      r.latent.resize(static_cast<size_t>(r.t) * r.h * r.w);
      src.get_bytes(r.latent.data(), r.latent.size() * sizeof(float));
      out.push_back(std::move(r));
    }
  }
  return ds;
}

}  // namespace nspforge
