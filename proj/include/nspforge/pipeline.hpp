#pragma once

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nspforge/config.hpp"
#include "nspforge/errors.hpp"
#include "nspforge/flowcore.hpp"
#include "nspforge/grpo.hpp"
#include "nspforge/judge.hpp"
#include "nspforge/netstack.hpp"
#include "nspforge/optim.hpp"
#include "nspforge/toyworld.hpp"

namespace nspforge {

// ---- Config-derived builders ----------------------------------------------

inline World world_from_config(const Config& c) {
  return build_world(c.world_classes, c.world_frames, c.world_height,
                     c.world_width, c.resolved_world_seed(),
                     c.world_sigma_render);
}

inline NetConfig net_from_config(const Config& c, const World& w) {
  return NetConfig::from_config(c, w.vocab(), w.frames, w.height * w.width);
}

inline DatasetSizes sizes_from_config(const Config& c) {
  DatasetSizes s;
  s.pretrain_img = c.data_pretrain_img;
  s.pretrain_mix = c.data_pretrain_mix;
  s.pretrain_vid = c.data_pretrain_vid;
  s.sft = c.data_sft;
  s.rl = c.data_rl;
  s.test = c.data_test;
  return s;
}

inline SamplerConfig eval_sampler(const Config& c) {
  SamplerConfig sc;
  sc.steps = c.sampler_steps;
  sc.eta = c.sampler_eta;
  sc.guidance = c.sampler_guidance;
  return sc;
}

// ---- Supervised stages -----------------------------------------------------

// One flow-matching training phase: which split it consumes, how long it
// runs, and whether only the conditioning pathway is trainable.
struct StageSpec {
  std::string name;  // also the checkpoint stem and the stage seed label
  Split split = Split::pretrain_img;
  int epochs = 1;
  int batch = 1;
  double lr = 1e-3;
  bool connector_only = false;
};

inline std::array<StageSpec, 3> pretrain_stages(const Config& c) {
  return {
      StageSpec{"stage1_t2i", Split::pretrain_img, c.stage1_epochs,
                c.stage1_batch, c.stage1_lr, true},
      StageSpec{"stage2_mix", Split::pretrain_mix, c.stage2_epochs,
                c.stage2_batch, c.stage2_lr, false},
      StageSpec{"stage3_vid", Split::pretrain_vid, c.stage3_epochs,
                c.stage3_batch, c.stage3_lr, false},
  };
}

inline StageSpec sft_stage(const Config& c) {
  return {"sft", Split::sft, c.sft_epochs, c.sft_batch, c.sft_lr, false};
}

struct LossRow {
  std::string stage;
  int epoch = 0;
  int batch = 0;
  double loss = 0.0;
};

inline std::string loss_csv(const std::vector<LossRow>& rows) {
  std::string out = "stage,epoch,batch,loss\n";
  char line[96];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%s,%d,%d,%.9g\n", r.stage.c_str(),
                  r.epoch, r.batch, r.loss);
    out += line;
  }
  return out;
}

// Epoch-shuffled minibatch flow-matching training. Each epoch reshuffles the
// split with a stage-and-epoch-derived stream and drops the ragged tail, so
// every step sees a full batch. One optimizer step per batch.
inline std::vector<LossRow> train_stage(VelocityPolicy& policy,
                                        const std::vector<SceneRecord>& records,
                                        const StageSpec& st, const Config& cfg) {
  if (st.epochs < 1 || st.batch < 1)
    throw ConfigError(st.name + ": epochs and batch must be >= 1");
  const int batches = static_cast<int>(records.size()) / st.batch;
  if (batches < 1)
    throw ConfigError(st.name + ": split smaller than one batch");
  AdamW opt = AdamW::from_config(cfg, policy.param_count(), st.lr);
  const auto mask =
      st.connector_only ? policy.connector_mask() : policy.full_mask();
  const uint64_t seed = derive(cfg.run_seed, fnv1a(st.name));
  FmLossOptions fo;
  fo.mask = &mask;
  std::vector<double> grad(policy.param_count(), 0.0);
  std::vector<const SceneRecord*> batch(st.batch);
  std::vector<LossRow> rows;
  rows.reserve(static_cast<size_t>(st.epochs) * batches);
  for (int e = 0; e < st.epochs; ++e) {
    Rng rng(derive(seed, 0xe90c, static_cast<uint64_t>(e)));
    const std::vector<size_t> perm = rng.permutation(records.size());
    for (int b = 0; b < batches; ++b) {
      for (int i = 0; i < st.batch; ++i)
        batch[i] = &records[perm[static_cast<size_t>(b) * st.batch + i]];
      std::fill(grad.begin(), grad.end(), 0.0);
      const double loss = fm_loss(policy, batch, rng, &grad, fo);
      opt.step(policy.params, grad, &mask);
      rows.push_back({st.name, e, b, loss});
    }
  }
  return rows;
}

// ---- Run directory ---------------------------------------------------------

struct RunPaths {
  std::string dir;
  explicit RunPaths(std::string d) : dir(std::move(d)) {}

  std::string resolved() const { return dir + "/resolved.cfg"; }
  std::string dataset() const { return dir + "/data.nspd"; }
  std::string curation() const { return dir + "/curation.csv"; }
  std::string checkpoint(const std::string& stem) const {
    return dir + "/" + stem + ".nspc";
  }
  std::string pretrain_loss() const { return dir + "/pretrain_loss.csv"; }
  std::string sft_loss() const { return dir + "/sft_loss.csv"; }
  std::string wo_pt_loss() const { return dir + "/sft_wo_pt_loss.csv"; }
  std::string rl_metrics() const { return dir + "/rl_metrics.csv"; }
  std::string eval(const std::string& tag) const {
    return dir + "/eval_" + tag + ".csv";
  }
  std::string summary() const { return dir + "/summary.json"; }
  std::string timings() const { return dir + "/timings.csv"; }
};

inline void write_text(const std::string& path, const std::string& text) {
  write_file(path, {text.begin(), text.end()}, "io");
}

// Drops the keys that describe the execution environment rather than the
// experiment; results are independent of them, so rejoining a run directory
// with a different thread count or path spelling is legitimate.
inline std::string experiment_lines(const std::string& resolved_text) {
  std::istringstream in(resolved_text);
  std::string out, line;
  while (std::getline(in, line))
    if (line.rfind("run.out_dir", 0) != 0 && line.rfind("run.threads", 0) != 0)
      out += line + "\n";
  return out;
}

// Refuses to touch a run directory created under different experiment
// settings: resume and read-back must never silently mix configurations.
inline void require_same_experiment(const RunPaths& rp, const Config& cfg) {
  if (!std::filesystem::exists(rp.resolved())) return;
  const auto prev = read_file(rp.resolved());
  if (experiment_lines({prev.begin(), prev.end()}) !=
      experiment_lines(cfg.resolved_text()))
    throw ConfigError("out dir '" + rp.dir +
                      "' holds a different configuration; rerun with the "
                      "matching --config/--set flags or pick a fresh "
                      "directory");
}

// Claims (or rejoins) an output directory.
inline RunPaths claim_out_dir(const Config& cfg) {
  RunPaths rp(cfg.run_out_dir);
  std::filesystem::create_directories(rp.dir);
  require_same_experiment(rp, cfg);
  if (!std::filesystem::exists(rp.resolved()))
    write_text(rp.resolved(), cfg.resolved_text());
  return rp;
}

// ---- Phases ----------------------------------------------------------------

inline std::string curation_csv(const CurationStats& st) {
  char line[160];
  std::snprintf(line, sizeof line,
                "generated,accepted,regenerations,discarded\n%ld,%ld,%ld,%ld\n",
                st.generated, st.accepted, st.regenerations, st.discarded);
  return line;
}

// Builds the dataset once per run directory; a later call verifies the file
// matches the configured world instead of regenerating it.
inline Dataset ensure_dataset(const Config& cfg, const World& w,
                              const RunPaths& rp) {
  if (std::filesystem::exists(rp.dataset())) {
    Dataset ds = load_dataset(rp.dataset());
    if (ds.classes != w.classes || ds.frames != w.frames ||
        ds.height != w.height || ds.width != w.width ||
        ds.world_seed != w.seed)
      throw DatasetError("existing dataset was built for a different world");
    const DatasetSizes sizes = sizes_from_config(cfg);
    for (int i = 0; i < kSplitCount; ++i) {
      const Split sp = static_cast<Split>(i);
      if (static_cast<int>(ds.split(sp).size()) != sizes.of(sp))
        throw DatasetError("existing dataset split sizes disagree with the "
                           "configuration");
    }
    return ds;
  }
  CurationStats stats;
  Dataset ds = build_dataset(w, sizes_from_config(cfg),
                             cfg.resolved_data_seed(), cfg.data_corruption_p,
                             &stats, cfg.data_max_attempts);
  save_dataset(ds, rp.dataset());
  write_text(rp.curation(), curation_csv(stats));
  return ds;
}

// Runs the staged pretraining chain, resuming past any stage whose
// checkpoint already exists. Loss rows cover only the stages trained now.
inline std::vector<LossRow> pretrain(VelocityPolicy& policy, const Dataset& ds,
                                     const Config& cfg, const RunPaths& rp) {
  std::vector<LossRow> rows;
  for (const StageSpec& st : pretrain_stages(cfg)) {
    const std::string ck = rp.checkpoint(st.name);
    if (std::filesystem::exists(ck)) {
      load_checkpoint(policy, ck);
      continue;
    }
    const auto r = train_stage(policy, ds.split(st.split), st, cfg);
    rows.insert(rows.end(), r.begin(), r.end());
    save_checkpoint(policy, ck);
  }
  return rows;
}

// Supervised fine-tune on curated next-scene data; `spec` distinguishes the
// main branch from the no-pretrain ablation (separate checkpoint and seed).
inline std::vector<LossRow> finetune(VelocityPolicy& policy, const Dataset& ds,
                                     const StageSpec& spec, const Config& cfg,
                                     const RunPaths& rp) {
  const std::string ck = rp.checkpoint(spec.name);
  if (std::filesystem::exists(ck)) {
    load_checkpoint(policy, ck);
    return {};
  }
  auto rows = train_stage(policy, ds.split(spec.split), spec, cfg);
  save_checkpoint(policy, ck);
  return rows;
}

// Reinforcement phase: prompts come from the rl split, the periodic
// validation slice is the head of the test split, and the finished policy is
// pinned as rl_final. Returns no rows when resuming from a finished run.
inline std::vector<RlMetricsRow> reinforce(VelocityPolicy& policy,
                                           const World& w, const Dataset& ds,
                                           const Config& cfg,
                                           const RunPaths& rp) {
  const std::string ck = rp.checkpoint("rl_final");
  if (std::filesystem::exists(ck)) {
    load_checkpoint(policy, ck);
    return {};
  }
  const auto& test = ds.split(Split::test);
  const size_t nval =
      std::min<size_t>(static_cast<size_t>(cfg.grpo_val_records), test.size());
  const std::vector<SceneRecord> val(test.begin(),
                                     test.begin() + static_cast<long>(nval));
  const RlResult rr = rl_train(policy, w, ds.split(Split::rl), val, cfg, rp.dir);
  save_checkpoint(policy, ck);
  write_text(rp.rl_metrics(), rl_metrics_csv(rr.rows));
  return rr.rows;
}

// ---- Orchestration ---------------------------------------------------------

struct RunSummary {
  uint64_t config_hash = 0;
  double pretrain_t2v = 0.0;  // caption-mode class match after pretraining
  double pretrain_nsp = 0.0;  // next-scene causal consistency after pretraining
  double sft_nsp = 0.0;
  double rl_nsp = 0.0;
  double wo_pt_nsp = -1.0;  // -1 when the ablation branch is disabled
  bool pretrain_gap = false;   // generates well yet cannot predict next scenes
  bool sft_gt_pretrain = false;
  bool rl_ge_sft = false;
  bool wo_pt_collapse = false;  // skipping pretraining loses the capability
};

inline nlohmann::json summary_json(const RunSummary& s) {
  nlohmann::json j;
  j["config_hash"] = s.config_hash;
  j["metrics"] = {{"pretrain_t2v_class_match", s.pretrain_t2v},
                  {"pretrain_nsp_causal", s.pretrain_nsp},
                  {"sft_nsp_causal", s.sft_nsp},
                  {"rl_nsp_causal", s.rl_nsp},
                  {"sft_wo_pt_nsp_causal", s.wo_pt_nsp}};
  j["ordering"] = {{"pretrain_gap", s.pretrain_gap},
                   {"sft_gt_pretrain", s.sft_gt_pretrain},
                   {"rl_ge_sft", s.rl_ge_sft},
                   {"wo_pt_collapse", s.wo_pt_collapse}};
  return j;
}

inline RunSummary load_summary(const std::string& path) {
  const auto bytes = read_file(path);
  const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
  RunSummary s;
  s.config_hash = j.at("config_hash").get<uint64_t>();
  const auto& m = j.at("metrics");
  s.pretrain_t2v = m.at("pretrain_t2v_class_match").get<double>();
  s.pretrain_nsp = m.at("pretrain_nsp_causal").get<double>();
  s.sft_nsp = m.at("sft_nsp_causal").get<double>();
  s.rl_nsp = m.at("rl_nsp_causal").get<double>();
  s.wo_pt_nsp = m.at("sft_wo_pt_nsp_causal").get<double>();
  const auto& o = j.at("ordering");
  s.pretrain_gap = o.at("pretrain_gap").get<bool>();
  s.sft_gt_pretrain = o.at("sft_gt_pretrain").get<bool>();
  s.rl_ge_sft = o.at("rl_ge_sft").get<bool>();
  s.wo_pt_collapse = o.at("wo_pt_collapse").get<bool>();
  return s;
}

// Wall-clock bookkeeping. Kept in its own file so every metric artifact
// stays byte-reproducible across runs of the same configuration.
class PhaseTimer {
 public:
  void run(const std::string& name, const std::function<void()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    body();
    const std::chrono::duration<double> dt =
        std::chrono::steady_clock::now() - t0;
    rows_.emplace_back(name, dt.count());
  }
  std::string csv() const {
    std::string out = "phase,seconds\n";
    char line[96];
    for (const auto& [name, sec] : rows_) {
      std::snprintf(line, sizeof line, "%s,%.3f\n", name.c_str(), sec);
      out += line;
    }
    return out;
  }

 private:
  std::vector<std::pair<std::string, double>> rows_;
};

// The whole experiment in one call: data, staged pretraining, supervised
// fine-tune, reinforcement, the no-pretrain ablation, and the evaluations
// that compare them. Every phase resumes from its artifact when rerun over
// the same directory.
inline RunSummary run_all(const Config& cfg) {
  cfg.validate();
  const RunPaths rp = claim_out_dir(cfg);
  const World w = world_from_config(cfg);
  const NetConfig net = net_from_config(cfg, w);
  const SamplerConfig sc = eval_sampler(cfg);
  const uint64_t eval_seed = cfg.resolved_eval_seed();
  const uint64_t init_seed = derive(cfg.run_seed, fnv1a("init"));

  PhaseTimer timer;
  RunSummary s;
  s.config_hash = cfg.hash();

  Dataset ds;
  timer.run("gen_data", [&] { ds = ensure_dataset(cfg, w, rp); });
  const auto& test = ds.split(Split::test);

  VelocityPolicy policy(net);
  policy.init_params(init_seed);

  std::vector<LossRow> pre_rows;
  timer.run("pretrain", [&] { pre_rows = pretrain(policy, ds, cfg, rp); });
  if (!pre_rows.empty()) write_text(rp.pretrain_loss(), loss_csv(pre_rows));

  timer.run("eval_pretrain", [&] {
    const EvalResult t2v =
        evaluate_t2v(policy, w, cfg.eval_t2v_samples, sc, eval_seed);
    const EvalResult nsp = evaluate_nsp(policy, test, w, sc, eval_seed);
    s.pretrain_t2v = t2v.causal_consistency;
    s.pretrain_nsp = nsp.causal_consistency;
    write_text(rp.eval("pretrain_t2v"), eval_csv(t2v, "t2v"));
    write_text(rp.eval("pretrain_nsp"), eval_csv(nsp, "test"));
  });

  std::vector<LossRow> sft_rows;
  timer.run("sft", [&] {
    sft_rows = finetune(policy, ds, sft_stage(cfg), cfg, rp);
  });
  if (!sft_rows.empty()) write_text(rp.sft_loss(), loss_csv(sft_rows));

  timer.run("eval_sft", [&] {
    const EvalResult nsp = evaluate_nsp(policy, test, w, sc, eval_seed);
    s.sft_nsp = nsp.causal_consistency;
    write_text(rp.eval("sft_nsp"), eval_csv(nsp, "test"));
  });

  timer.run("rl", [&] { reinforce(policy, w, ds, cfg, rp); });

  timer.run("eval_rl", [&] {
    const EvalResult nsp = evaluate_nsp(policy, test, w, sc, eval_seed);
    s.rl_nsp = nsp.causal_consistency;
    write_text(rp.eval("rl_nsp"), eval_csv(nsp, "test"));
  });

  if (cfg.pipeline_ablate_wo_pt) {
    VelocityPolicy scratch(net);
    scratch.init_params(init_seed);  // same start, no pretraining chain
    StageSpec spec = sft_stage(cfg);
    spec.name = "sft_wo_pt";
    std::vector<LossRow> ab_rows;
    timer.run("sft_wo_pt", [&] {
      ab_rows = finetune(scratch, ds, spec, cfg, rp);
    });
    if (!ab_rows.empty()) write_text(rp.wo_pt_loss(), loss_csv(ab_rows));
    timer.run("eval_wo_pt", [&] {
      const EvalResult nsp = evaluate_nsp(scratch, test, w, sc, eval_seed);
      s.wo_pt_nsp = nsp.causal_consistency;
      write_text(rp.eval("wo_pt_nsp"), eval_csv(nsp, "test"));
    });
  }

  s.pretrain_gap = s.pretrain_t2v > s.pretrain_nsp;
  s.sft_gt_pretrain = s.sft_nsp > s.pretrain_nsp;
  s.rl_ge_sft = s.rl_nsp >= s.sft_nsp;
  // Collapse means losing most of the capability, not merely trailing it.
  s.wo_pt_collapse =
      cfg.pipeline_ablate_wo_pt && s.wo_pt_nsp < 0.5 * s.sft_nsp;

  write_text(rp.summary(), summary_json(s).dump(2) + "\n");
  write_text(rp.timings(), timer.csv());
  return s;
}

// Plot-ready bundle under <run>/export: the reinforcement curve, the flow
// loss curves joined into one file (stage column intact), and the summary
// with its stage-ordering verdict. Every input is a deterministic artifact,
// so re-export reproduces the bundle byte for byte. Returns the bundle dir.
inline std::string export_metrics(const std::string& run_dir) {
  const RunPaths rp(run_dir);
  if (!std::filesystem::exists(rp.summary()))
    throw IoError("export: no summary.json under '" + run_dir +
                  "'; run-all must finish first");
  const std::string out = run_dir + "/export";
  std::filesystem::create_directories(out);

  write_text(out + "/summary.json",
             summary_json(load_summary(rp.summary())).dump(2) + "\n");
  if (std::filesystem::exists(rp.rl_metrics()))
    write_file(out + "/rl_curve.csv", read_file(rp.rl_metrics()), "io");

  std::string losses;
  for (const std::string& p :
       {rp.pretrain_loss(), rp.sft_loss(), rp.wo_pt_loss()}) {
    if (!std::filesystem::exists(p)) continue;
    const auto bytes = read_file(p);
    const std::string text(bytes.begin(), bytes.end());
    if (losses.empty())
      losses = text;
    else
      losses += text.substr(text.find('\n') + 1);  // keep one header
  }
  if (!losses.empty()) write_text(out + "/flow_loss.csv", losses);
  return out;
}

}  // namespace nspforge
