// Operator surface: every subcommand is a thin wrapper over the library; no
// numerical logic lives here. Exit codes: 0 success, 1 bad operator input,
// 2 runtime failure.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nspforge/pipeline.hpp"
#include "nspforge/threads.hpp"

namespace fs = std::filesystem;
using namespace nspforge;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::string seed;  // string so "given at all" is observable
  int threads = -1;
  bool json_errors = false;
};

void add_common(CLI::App* sub, CommonOpts& o) {
  sub->add_option("--config", o.config_path, "configuration file");
  sub->add_option("--set", o.overrides,
                  "override a key, e.g. --set grpo.steps=40 (repeatable)");
  sub->add_option("--out", o.out_dir, "run directory (run.out_dir)");
  sub->add_option("--seed", o.seed, "experiment seed (run.seed)");
  sub->add_option("--threads", o.threads, "worker threads (run.threads)");
  sub->add_flag("--json-errors", o.json_errors,
                "report failures as JSON on stderr");
}

// Precedence: file < --set < dedicated flags.
Config make_config(const CommonOpts& o) {
  Config cfg;
  if (!o.config_path.empty()) cfg = load_config(o.config_path);
  cfg.apply_overrides(o.overrides);
  if (!o.seed.empty()) cfg.set("run.seed", o.seed);
  if (!o.out_dir.empty()) cfg.run_out_dir = o.out_dir;
  if (o.threads >= 0) cfg.run_threads = o.threads;
  cfg.validate();
  global_threads() = resolve_threads(cfg.run_threads);
  return cfg;
}

VelocityPolicy fresh_policy(const Config& cfg, const World& w) {
  VelocityPolicy p(net_from_config(cfg, w));
  p.init_params(derive(cfg.run_seed, fnv1a("init")));
  return p;
}

void cmd_gen_data(const Config& cfg) {
  const RunPaths rp = claim_out_dir(cfg);
  const World w = world_from_config(cfg);
  const Dataset ds = ensure_dataset(cfg, w, rp);
  std::printf("dataset: %s\n", rp.dataset().c_str());
  for (int i = 0; i < kSplitCount; ++i) {
    const Split sp = static_cast<Split>(i);
    std::printf("  %-12s %zu records\n", split_name(sp), ds.split(sp).size());
  }
}

void cmd_pretrain(const Config& cfg) {
  const RunPaths rp = claim_out_dir(cfg);
  const World w = world_from_config(cfg);
  const Dataset ds = ensure_dataset(cfg, w, rp);
  VelocityPolicy policy = fresh_policy(cfg, w);
  const auto rows = pretrain(policy, ds, cfg, rp);
  if (!rows.empty()) write_text(rp.pretrain_loss(), loss_csv(rows));
  std::printf("pretraining finished: %zu optimizer steps this invocation\n",
              rows.size());
  std::printf("checkpoints: stage1_t2i, stage2_mix, stage3_vid under %s\n",
              rp.dir.c_str());
}

void cmd_sft(const Config& cfg) {
  const RunPaths rp = claim_out_dir(cfg);
  const World w = world_from_config(cfg);
  const Dataset ds = ensure_dataset(cfg, w, rp);
  VelocityPolicy policy = fresh_policy(cfg, w);
  if (!fs::exists(rp.checkpoint("sft"))) {
    const std::string base = rp.checkpoint("stage3_vid");
    if (!fs::exists(base))
      throw CheckpointError("sft needs " + base + "; run pretrain first");
    load_checkpoint(policy, base);
  }
  const auto rows = finetune(policy, ds, sft_stage(cfg), cfg, rp);
  if (!rows.empty()) write_text(rp.sft_loss(), loss_csv(rows));
  std::printf("sft finished: checkpoint %s\n", rp.checkpoint("sft").c_str());
}

void cmd_rl(const Config& cfg) {
  const RunPaths rp = claim_out_dir(cfg);
  const World w = world_from_config(cfg);
  const Dataset ds = ensure_dataset(cfg, w, rp);
  VelocityPolicy policy = fresh_policy(cfg, w);
  if (!fs::exists(rp.checkpoint("rl_final"))) {
    const std::string base = rp.checkpoint("sft");
    if (!fs::exists(base))
      throw CheckpointError("rl needs " + base + "; run sft first");
    load_checkpoint(policy, base);
  }
  const auto rows = reinforce(policy, w, ds, cfg, rp);
  if (rows.empty()) {
    std::printf("rl already finished: %s\n",
                rp.checkpoint("rl_final").c_str());
  } else {
    std::printf("rl finished: %zu steps, final held-out causal "
                "consistency %.4f\n",
                rows.size(), rows.back().val_causal_consistency);
  }
}

void cmd_eval(const Config& cfg, std::string checkpoint) {
  const RunPaths rp(cfg.run_out_dir);
  require_same_experiment(rp, cfg);
  const World w = world_from_config(cfg);
  if (checkpoint.empty()) checkpoint = rp.checkpoint("rl_final");
  VelocityPolicy policy(net_from_config(cfg, w));
  load_checkpoint(policy, checkpoint);
  const Dataset ds = load_dataset(rp.dataset());
  const SamplerConfig sc = eval_sampler(cfg);
  const uint64_t seed = cfg.resolved_eval_seed();
  const EvalResult nsp =
      evaluate_nsp(policy, ds.split(Split::test), w, sc, seed);
  const EvalResult t2v =
      evaluate_t2v(policy, w, cfg.eval_t2v_samples, sc, seed);
  nlohmann::json j;
  j["checkpoint"] = checkpoint;
  j["nsp_causal"] = nsp.causal_consistency;
  j["nsp_passed"] = nsp.passed;
  j["nsp_total"] = nsp.total;
  j["t2v_class_match"] = t2v.causal_consistency;
  std::printf("%s\n", j.dump(2).c_str());
}

void cmd_run_all(const Config& cfg) {
  const RunSummary s = run_all(cfg);
  std::printf("%s\n", summary_json(s).dump(2).c_str());
}

void print_record(const SceneRecord& r, const char* split, size_t idx) {
  std::printf("  %s/%06zu class=%u successor=%u tokens=[", split, idx,
              r.class_id, r.successor_id);
  for (size_t i = 0; i < r.tokens.size(); ++i)
    std::printf("%s%u", i ? " " : "", r.tokens[i]);
  std::printf("] shape=%dx%dx%d latent[0..3]=", r.t, r.h, r.w);
  for (size_t i = 0; i < 4 && i < r.latent.size(); ++i)
    std::printf("%s%.4f", i ? " " : "", r.latent[i]);
  std::printf("\n");
}

void cmd_inspect(const std::string& dataset, const std::string& checkpoint) {
  if (dataset.empty() && checkpoint.empty())
    throw ConfigError("inspect: pass --dataset and/or --checkpoint");
  if (!dataset.empty()) {
    const Dataset ds = load_dataset(dataset);
    std::printf("dataset %s: classes=%d frames=%d height=%d width=%d "
                "world_seed=%" PRIu64 "\n",
                dataset.c_str(), ds.classes, ds.frames, ds.height, ds.width,
                ds.world_seed);
    for (int i = 0; i < kSplitCount; ++i) {
      const Split sp = static_cast<Split>(i);
      std::printf("  %-12s %zu records\n", split_name(sp),
                  ds.split(sp).size());
    }
    std::printf("sample records:\n");
    int shown = 0;
    for (int i = 0; i < kSplitCount && shown < 3; ++i) {
      const Split sp = static_cast<Split>(i);
      if (ds.split(sp).empty()) continue;
      print_record(ds.split(sp)[0], split_name(sp), 0);
      shown++;
    }
  }
  if (!checkpoint.empty()) {
    std::vector<char> bytes;
    try {
      bytes = read_file(checkpoint);
    } catch (const IoError& e) {
      throw CheckpointError(e.what());
    }
    ByteSource src(bytes.data(), bytes.size());
    char magic[4];
    src.get_bytes(magic, 4);
    if (std::string(magic, 4) != "NSPC")
      throw CheckpointError("bad magic in " + checkpoint);
    const uint32_t version = src.get<uint32_t>();
    const uint64_t sig = src.get<uint64_t>();
    const uint64_t count = src.get<uint64_t>();
    std::printf("checkpoint %s: version=%u signature=%016" PRIx64
                " params=%" PRIu64 "\n",
                checkpoint.c_str(), version, sig, count);
  }
}

void cmd_export(const Config& cfg) {
  const std::string bundle = export_metrics(cfg.run_out_dir);
  std::printf("exported: %s\n", bundle.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale next-scene prediction: data, training, evaluation"};
  app.require_subcommand(1);

  CommonOpts common;
  std::string eval_checkpoint, inspect_dataset, inspect_checkpoint;

  CLI::App* gen = app.add_subcommand("gen-data", "build the scene dataset");
  CLI::App* pre = app.add_subcommand("pretrain", "run the 3-stage chain");
  CLI::App* sft = app.add_subcommand("sft", "supervised fine-tune");
  CLI::App* rl = app.add_subcommand("rl", "reinforcement with the scene judge");
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  CLI::App* all = app.add_subcommand("run-all", "full pipeline end to end");
  CLI::App* ins = app.add_subcommand("inspect", "decode artifact files");
  CLI::App* exp =
      app.add_subcommand("export-metrics", "bundle plot-ready metrics");

  for (CLI::App* sub : {gen, pre, sft, rl, ev, all, ins, exp})
    add_common(sub, common);
  ev->add_option("--checkpoint", eval_checkpoint,
                 "checkpoint path (default: <out>/rl_final.nspc)");
  ins->add_option("--dataset", inspect_dataset, "dataset file to decode");
  ins->add_option("--checkpoint", inspect_checkpoint,
                  "checkpoint file to describe");

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e);  // prints usage or version text
      return code == 0 ? 0 : 1;
    }
    if (gen->parsed()) cmd_gen_data(make_config(common));
    if (pre->parsed()) cmd_pretrain(make_config(common));
    if (sft->parsed()) cmd_sft(make_config(common));
    if (rl->parsed()) cmd_rl(make_config(common));
    if (ev->parsed()) cmd_eval(make_config(common), eval_checkpoint);
    if (all->parsed()) cmd_run_all(make_config(common));
    if (ins->parsed()) cmd_inspect(inspect_dataset, inspect_checkpoint);
    if (exp->parsed()) cmd_export(make_config(common));
    return 0;
  } catch (const Error& e) {
    if (common.json_errors) {
      nlohmann::json j;
      j["kind"] = e.kind();
      j["message"] = e.what();
      std::fprintf(stderr, "%s\n", j.dump().c_str());
    } else {
      std::fprintf(stderr, "error: %s\n", e.what());
    }
    return dynamic_cast<const ConfigError*>(&e) ? 1 : 2;
  }
}
