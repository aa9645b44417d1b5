#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "nspforge/config.hpp"
#include "nspforge/errors.hpp"
#include "nspforge/judge.hpp"
#include "nspforge/netstack.hpp"
#include "nspforge/optim.hpp"
#include "nspforge/rng.hpp"
#include "nspforge/sampler.hpp"
#include "nspforge/toyworld.hpp"

namespace nspforge {

struct GrpoConfig {
  int group_size = 24;
  int select_top = 4;
  int select_bottom = 4;
  double clip = 0.2;
  int groups_per_step = 8;
  int steps = 60;
  double lr = 1e-4;
  double eps_std = 1e-8;
  int val_every = 10;
  int val_records = 50;
  int checkpoint_every = 20;
  SamplerConfig sampler;      // stochastic rollouts that produce candidates
  SamplerConfig val_sampler;  // deterministic settings for the val slice

  static GrpoConfig from_config(const Config& c) {
    if (c.grpo_kl_coef != 0.0)
      throw ConfigError(
          "grpo.kl_coef: reference-policy penalty is not part of this "
          "objective; must be 0");
    GrpoConfig g;
    g.group_size = c.grpo_group_size;
    g.select_top = c.grpo_select_top;
    g.select_bottom = c.grpo_select_bottom;
    g.clip = c.grpo_clip;
    g.groups_per_step = c.grpo_groups_per_step;
    g.steps = c.grpo_steps;
    g.lr = c.grpo_lr;
    g.eps_std = c.grpo_eps_std;
    g.val_every = c.grpo_val_every;
    g.val_records = c.grpo_val_records;
    g.checkpoint_every = c.grpo_checkpoint_every;
    g.sampler.steps = c.grpo_rollout_steps;
    g.sampler.eta = c.grpo_eta;
    g.sampler.guidance = c.grpo_guidance;
    g.val_sampler.steps = c.sampler_steps;
    g.val_sampler.eta = 0.0;
    g.val_sampler.guidance = c.sampler_guidance;
    return g;
  }
};

// Group-relative advantages: center by the group mean, scale by the
// population standard deviation plus a small floor.
inline std::vector<double> advantages(const std::vector<double>& rewards,
                                      double eps_std) {
  const int g = static_cast<int>(rewards.size());
  if (g < 2) throw ConfigError("advantages: group must have >= 2 members");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= g;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= g;
  const double denom = std::sqrt(var) + eps_std;
  std::vector<double> a(rewards.size());
  for (size_t i = 0; i < a.size(); ++i) a[i] = (rewards[i] - mean) / denom;
  return a;
}

inline bool is_degenerate(const std::vector<double>& rewards) {
  const auto [lo, hi] = std::minmax_element(rewards.begin(), rewards.end());
  return *lo == *hi;
}

// Indices of the best select_top and worst select_bottom candidates, ranked
// by reward descending with ties broken toward the lower index.
inline std::vector<int> select_candidates(const std::vector<double>& rewards,
                                          int top, int bottom) {
  const int g = static_cast<int>(rewards.size());
  if (top < 1 || bottom < 1 || top + bottom > g)
    throw ConfigError("select_candidates: top/bottom out of range");
  std::vector<int> order(g);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return rewards[a] > rewards[b];
  });
  std::vector<int> sel(order.begin(), order.begin() + top);
  sel.insert(sel.end(), order.end() - bottom, order.end());
  return sel;
}

// One prompt, group_size stochastic generations from shared initial noise,
// each judged independently.
struct Group {
  int scene = -1;
  std::vector<double> x1;
  std::vector<Rollout> rollouts;
  std::vector<RewardRecord> rewards;

  std::vector<double> reward_values() const {
    std::vector<double> r(rewards.size());
    for (size_t i = 0; i < r.size(); ++i) r[i] = rewards[i].reward;
    return r;
  }
};

inline Group sample_group(const VelocityPolicy& policy, const SceneRecord& rec,
                          const World& w, const GrpoConfig& gc, Rng& rng) {
  if (!(gc.sampler.eta > 0.0))
    throw ConfigError("sample_group: stochastic rollouts need eta > 0");
  Group grp;
  grp.scene = static_cast<int>(rec.class_id);
  const size_t n = static_cast<size_t>(w.frames) * w.height * w.width;
  grp.x1.resize(n);
  rng.fill_normal(grp.x1.data(), n);
  grp.rollouts.reserve(gc.group_size);
  for (int i = 0; i < gc.group_size; ++i) {
    grp.rollouts.push_back(
        rollout(policy, rec.tokens, w.frames, gc.sampler, rng, &grp.x1));
    LatentVideo video(w.frames, w.height, w.width);
    video.data = grp.rollouts.back().x0;
    grp.rewards.push_back(judge_reward(grp.scene, video, w));
  }
  return grp;
}

namespace detail {

struct ClipTerm {
  int node;
  double rho;
};

// min(rho * A, clamp(rho, 1-c, 1+c) * A) with rho = exp(new - old); for
// positive advantages only upward ratio moves clip, for negative only
// downward — the standard one-sided trust region.
inline ClipTerm clip_term(Tape& tape, int logp_new, double logp_old,
                          double adv, double clip) {
  const int diff = tape.lin(logp_new, tape.constant(&logp_old, 1, 1), 1.0, -1.0);
  const int rho = tape.exp_(diff);
  const int unclipped = tape.scale(rho, adv);
  const int clipped = tape.scale(tape.clamp(rho, 1.0 - clip, 1.0 + clip), adv);
  return {tape.min_(unclipped, clipped), tape.scalar(rho)};
}

}  // namespace detail

struct SurrogateStats {
  double objective = 0.0;  // mean over selected candidates of per-step means
  long clip_events = 0;    // terms where the clipped branch was the minimum
  long terms = 0;
};

// Clipped-ratio objective over the selected candidates of one group; the
// gradient of its negation is accumulated into grad. Each candidate
// contributes the mean of its per-stochastic-step terms, scaled by its
// group-relative advantage.
inline SurrogateStats surrogate(const VelocityPolicy& policy, const Group& grp,
                                const std::vector<int>& selected,
                                const std::vector<double>& adv,
                                const GrpoConfig& gc, std::vector<double>* grad,
                                const std::vector<uint8_t>* mask = nullptr) {
  if (selected.empty()) throw ProtocolError("surrogate: empty selection");
  SurrogateStats st;
  Tape tape(policy.params, grad, mask);
  const int cond =
      policy.condition_tokens(tape, grp.rollouts[selected[0]].tokens);
  int total = -1;
  for (int idx : selected) {
    const Rollout& ro = grp.rollouts[idx];
    const double a = adv[idx];
    const std::vector<int> logps = log_prob_nodes(policy, tape, ro, cond);
    if (logps.empty())
      throw ProtocolError("surrogate: rollout has no stochastic steps");
    std::vector<double> old_lps;
    old_lps.reserve(logps.size());
    for (const auto& tr : ro.transitions)
      if (tr.stochastic) old_lps.push_back(tr.log_prob);
    if (old_lps.size() != logps.size())
      throw ProtocolError("surrogate: stochastic step miscount");
    int cand = -1;
    for (size_t k = 0; k < logps.size(); ++k) {
      const auto term =
          detail::clip_term(tape, logps[k], old_lps[k], a, gc.clip);
      st.terms++;
      // The clipped branch wins when the ratio left the trust region on the
      // advantage's bad side.
      if ((a > 0.0 && term.rho > 1.0 + gc.clip) ||
          (a < 0.0 && term.rho < 1.0 - gc.clip))
        st.clip_events++;
      cand = cand < 0 ? term.node : tape.lin(cand, term.node, 1.0, 1.0);
    }
    const int cand_mean =
        tape.scale(cand, 1.0 / static_cast<double>(logps.size()));
    total = total < 0 ? cand_mean : tape.lin(total, cand_mean, 1.0, 1.0);
  }
  const int objective =
      tape.scale(total, 1.0 / static_cast<double>(selected.size()));
  st.objective = tape.scalar(objective);
  if (!std::isfinite(st.objective))
    throw NumericsError("non-finite surrogate objective");
  if (grad) tape.backward(tape.scale(objective, -1.0));
  return st;
}

struct RlMetricsRow {
  int step = 0;
  double mean_reward = 0.0;
  double selected_frac = 0.0;
  double clip_frac = 0.0;
  double objective = 0.0;
  double val_causal_consistency = 0.0;
  int degenerate_groups = 0;
};

struct RlResult {
  std::vector<RlMetricsRow> rows;
  double final_val = 0.0;
};

inline std::string rl_metrics_csv(const std::vector<RlMetricsRow>& rows) {
  std::string out =
      "step,mean_reward,selected_frac,clip_frac,objective,"
      "val_causal_consistency,degenerate_groups\n";
  char line[192];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%d\n",
                  r.step, r.mean_reward, r.selected_frac, r.clip_frac,
                  r.objective, r.val_causal_consistency, r.degenerate_groups);
    out += line;
  }
  return out;
}

// Reinforcement loop: per optimization step, sample groups_per_step groups
// at fixed parameters, accumulate the surrogate gradient over non-degenerate
// groups, take one optimizer step, and track a held-out causal-consistency
// slice every val_every steps (carried forward in between). A numerics
// failure saves the last parameters before rethrowing; periodic checkpoints
// go to out_dir when one is given.
inline RlResult rl_train(VelocityPolicy& policy, const World& w,
                         const std::vector<SceneRecord>& rl_records,
                         const std::vector<SceneRecord>& val_slice,
                         const Config& cfg, const std::string& out_dir) {
  const GrpoConfig gc = GrpoConfig::from_config(cfg);
  if (rl_records.empty()) throw ConfigError("rl_train: no prompts");
  AdamW opt = AdamW::from_config(cfg, policy.param_count(), gc.lr);
  const uint64_t seed = derive(cfg.run_seed, fnv1a("rl"));
  const auto mask = policy.full_mask();
  const std::string ckpt = out_dir.empty() ? "" : out_dir + "/rl_last.nspc";

  RlResult res;
  double val =
      evaluate_nsp(policy, val_slice, w, gc.val_sampler, derive(seed, 0x7a17))
          .causal_consistency;
  std::vector<double> grad(policy.param_count(), 0.0);
  size_t cursor = 0;
  try {
    for (int step = 1; step <= gc.steps; ++step) {
      std::fill(grad.begin(), grad.end(), 0.0);
      RlMetricsRow row;
      row.step = step;
      int used = 0;
      long selected_n = 0, cand_n = 0, clip_events = 0, terms = 0;
      double reward_sum = 0.0, obj_sum = 0.0;
      for (int g = 0; g < gc.groups_per_step; ++g) {
        const SceneRecord& rec = rl_records[cursor++ % rl_records.size()];
        Rng rng(derive(seed, 0x6701, static_cast<uint64_t>(step),
                       static_cast<uint64_t>(g)));
        const Group grp = sample_group(policy, rec, w, gc, rng);
        const std::vector<double> rewards = grp.reward_values();
        for (double r : rewards) reward_sum += r;
        cand_n += rewards.size();
        if (is_degenerate(rewards)) {
          row.degenerate_groups++;
          continue;
        }
        const std::vector<double> adv = advantages(rewards, gc.eps_std);
        const std::vector<int> sel =
            select_candidates(rewards, gc.select_top, gc.select_bottom);
        const SurrogateStats st = surrogate(policy, grp, sel, adv, gc, &grad);
        selected_n += sel.size();
        clip_events += st.clip_events;
        terms += st.terms;
        obj_sum += st.objective;
        used++;
      }
      if (used > 0) {
        for (auto& gv : grad) gv /= used;
        opt.step(policy.params, grad, &mask);
      }
      if (step % gc.val_every == 0)
        val = evaluate_nsp(policy, val_slice, w, gc.val_sampler,
                           derive(seed, 0x7a17))
                  .causal_consistency;
      row.mean_reward = cand_n ? reward_sum / cand_n : 0.0;
      row.selected_frac = cand_n ? static_cast<double>(selected_n) / cand_n : 0.0;
      row.clip_frac = terms ? static_cast<double>(clip_events) / terms : 0.0;
      row.objective = used ? obj_sum / used : 0.0;
      row.val_causal_consistency = val;
      res.rows.push_back(row);
      if (!ckpt.empty() &&
          (step % gc.checkpoint_every == 0 || step == gc.steps))
        save_checkpoint(policy, ckpt);
    }
  } catch (const NumericsError&) {
    if (!ckpt.empty()) save_checkpoint(policy, ckpt);
    throw;
  }
  res.final_val = val;
  return res;
}

}  // namespace nspforge
