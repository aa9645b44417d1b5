#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "nspforge/latent.hpp"
#include "nspforge/netstack.hpp"
#include "nspforge/rng.hpp"
#include "nspforge/sampler.hpp"
#include "nspforge/toyworld.hpp"

namespace nspforge {

// One judged generation. pass holds exactly when the video shows the
// successor of the prompted scene and is not a repetition of it.
struct RewardRecord {
  int scene = -1;   // prompted scene s
  int judged = -1;  // nearest-prototype class of the generated video
  bool pass = false;
  double reward = 0.0;  // binary: 1.0 on pass
  double margin = 0.0;  // judge confidence: second-best minus best distance
};

inline RewardRecord judge_reward(int scene, const LatentVideo& video,
                                 const World& w) {
  if (scene < 0 || scene >= w.classes)
    throw DomainError("judge_reward: scene out of range");
  const auto [q, margin] = nearest_class(video, w);
  RewardRecord r;
  r.scene = scene;
  r.judged = q;
  r.pass = q == w.successor[scene] && q != scene;
  r.reward = r.pass ? 1.0 : 0.0;
  r.margin = margin;
  return r;
}

struct EvalResult {
  double causal_consistency = 0.0;  // mean binary reward
  int total = 0;
  int passed = 0;
  std::vector<RewardRecord> records;
  std::vector<std::vector<int>> confusion;  // [prompted][judged]
};

namespace detail {

inline EvalResult summarize(std::vector<RewardRecord> rows, int classes) {
  EvalResult out;
  out.records = std::move(rows);
  out.total = static_cast<int>(out.records.size());
  out.confusion.assign(classes, std::vector<int>(classes, 0));
  for (const auto& r : out.records) {
    out.passed += r.pass;
    out.confusion[r.scene][r.judged]++;
  }
  out.causal_consistency =
      out.total == 0 ? 0.0 : static_cast<double>(out.passed) / out.total;
  return out;
}

}  // namespace detail

// Next-scene metric: for each held-out record, generate from its prompt with
// a per-record noise stream and ask the judge whether the result is the
// prompted scene's successor. Deterministic given (policy, records, seed).
inline EvalResult evaluate_nsp(const VelocityPolicy& policy,
                               const std::vector<SceneRecord>& records,
                               const World& w, const SamplerConfig& sc,
                               uint64_t seed) {
  std::vector<RewardRecord> rows;
  rows.reserve(records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    const SceneRecord& rec = records[i];
    if (rec.tokens.empty() || rec.tokens[0] != kTokenNSP)
      throw ProtocolError("evaluate_nsp: record is not next-scene mode");
    Rng rng(derive(seed, 0xe7a1, i));
    const LatentVideo video = sample_video(
        policy, rec.tokens, w.frames, w.height, w.width, sc, rng);
    rows.push_back(judge_reward(static_cast<int>(rec.class_id), video, w));
  }
  return detail::summarize(std::move(rows), w.classes);
}

// Caption-mode metric: prompt each class directly and count exact class
// matches (judged == prompted). Classes are cycled to fill the sample count.
inline EvalResult evaluate_t2v(const VelocityPolicy& policy, const World& w,
                               int samples, const SamplerConfig& sc,
                               uint64_t seed) {
  if (samples < 1) throw ConfigError("evaluate_t2v: samples must be >= 1");
  std::vector<RewardRecord> rows;
  rows.reserve(samples);
  for (int i = 0; i < samples; ++i) {
    const int c = i % w.classes;
    Rng rng(derive(seed, 0x72d7, static_cast<uint64_t>(i)));
    const LatentVideo video = sample_video(
        policy, t2v_tokens(c), w.frames, w.height, w.width, sc, rng);
    const auto [q, margin] = nearest_class(video, w);
    RewardRecord r;
    r.scene = c;
    r.judged = q;
    r.pass = q == c;  // caption mode wants the named class itself
    r.reward = r.pass ? 1.0 : 0.0;
    r.margin = margin;
    rows.push_back(r);
  }
  return detail::summarize(std::move(rows), w.classes);
}

// One row per judged record: key, prompted scene, judged class, verdict,
// margin.
inline std::string eval_csv(const EvalResult& ev,
                            const std::string& key_prefix) {
  std::string out = "record_key,scene,judged,pass,margin\n";
  char line[128];
  for (size_t i = 0; i < ev.records.size(); ++i) {
    const auto& r = ev.records[i];
    std::snprintf(line, sizeof line, "%s/%06zu,%d,%d,%d,%.9g\n",
                  key_prefix.c_str(), i, r.scene, r.judged, r.pass ? 1 : 0,
                  r.margin);
    out += line;
  }
  return out;
}

}  // namespace nspforge
