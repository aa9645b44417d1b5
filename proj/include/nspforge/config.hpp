#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "nspforge/errors.hpp"
#include "nspforge/io.hpp"
#include "nspforge/rng.hpp"

namespace nspforge {

// All run parameters live in one flat "section.key" namespace with a closed
// registry: unknown keys are rejected rather than ignored, so a typo can
// never silently fall back to a default. Seed-valued keys accept the string
// "auto", which resolves to a stream derived from run.seed and the key name.
struct Config {
  // world
  int world_classes = 8;
  int world_frames = 6;
  int world_height = 8;
  int world_width = 8;
  double world_sigma_render = 0.05;
  std::string world_seed = "auto";

  // data
  double data_corruption_p = 0.0;
  int data_max_attempts = 3;
  std::string data_seed = "auto";
  int data_pretrain_img = 20000;
  int data_pretrain_mix = 8000;
  int data_pretrain_vid = 6000;
  int data_sft = 1000;
  int data_rl = 512;
  int data_test = 200;

  // net
  int net_d_enc = 64;
  int net_d_mid = 128;
  int net_d_cond = 32;
  int net_queries = 16;
  int net_d_time = 32;
  int net_d_frame = 32;
  int net_hidden = 96;
  int net_n_frozen = 1;
  int net_l_max = 32;
  double net_eps_norm = 1e-6;
  double net_cond_dropout = 0.1;
  std::string net_encoder_seed = "auto";

  // sampler (evaluation-time defaults)
  int sampler_steps = 50;
  double sampler_eta = 0.3;
  double sampler_guidance = 3.0;

  // optim (shared by every gradient stage)
  double optim_beta1 = 0.9;
  double optim_beta2 = 0.999;
  double optim_eps = 1e-8;
  double optim_weight_decay = 0.0;

  // pretraining stages
  int stage1_epochs = 1;
  int stage1_batch = 32;
  double stage1_lr = 2e-3;
  int stage2_epochs = 1;
  int stage2_batch = 16;
  double stage2_lr = 1e-3;
  int stage3_epochs = 1;
  int stage3_batch = 16;
  double stage3_lr = 1e-3;

  // supervised fine-tuning
  int sft_epochs = 2;
  int sft_batch = 16;
  double sft_lr = 3e-4;

  // reinforcement stage
  int grpo_group_size = 24;
  int grpo_select_top = 4;
  int grpo_select_bottom = 4;
  double grpo_clip = 0.2;
  int grpo_groups_per_step = 12;
  int grpo_steps = 60;
  double grpo_lr = 3e-4;
  double grpo_eps_std = 1e-8;
  double grpo_kl_coef = 0.0;
  int grpo_val_every = 10;
  int grpo_val_records = 50;
  int grpo_checkpoint_every = 20;
  int grpo_rollout_steps = 10;
  double grpo_eta = 0.3;
  double grpo_guidance = 3.0;

  // evaluation
  int eval_t2v_samples = 64;
  std::string eval_seed = "auto";

  // pipeline
  bool pipeline_ablate_wo_pt = true;

  // run
  uint64_t run_seed = 1;
  int run_threads = 0;  // 0: resolve from environment
  std::string run_out_dir = "out";

  void set(const std::string& key, const std::string& value);
  void apply_overrides(const std::vector<std::string>& assignments);
  void validate() const;
  std::string resolved_text() const;
  uint64_t hash() const { return fnv1a(resolved_text()); }

  uint64_t resolved_world_seed() const { return resolve_seed(world_seed, "world.seed"); }
  uint64_t resolved_data_seed() const { return resolve_seed(data_seed, "data.seed"); }
  uint64_t resolved_encoder_seed() const { return resolve_seed(net_encoder_seed, "net.encoder_seed"); }
  uint64_t resolved_eval_seed() const { return resolve_seed(eval_seed, "eval.seed"); }

 private:
  uint64_t resolve_seed(const std::string& raw, const char* label) const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) b++;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) e--;
  return s.substr(b, e - b);
}

inline long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
  uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::string format_double(double v) {
  char buf[64];  // shortest representation that parses back exactly
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct KeyBinding {
  std::string key;
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

inline std::vector<KeyBinding> make_bindings() {
  std::vector<KeyBinding> out;
  auto bind_int = [&out](const char* key, int Config::*member) {
    out.push_back({key,
                   [key, member](Config& c, const std::string& v) {
                     c.*member = static_cast<int>(parse_int(key, v));
                   },
                   [member](const Config& c) { return std::to_string(c.*member); }});
  };
  auto bind_double = [&out](const char* key, double Config::*member) {
    out.push_back({key,
                   [key, member](Config& c, const std::string& v) {
                     c.*member = parse_double(key, v);
                   },
                   [member](const Config& c) { return format_double(c.*member); }});
  };
  auto bind_bool = [&out](const char* key, bool Config::*member) {
    out.push_back({key,
                   [key, member](Config& c, const std::string& v) {
                     c.*member = parse_bool(key, v);
                   },
                   [member](const Config& c) {
                     return std::string(c.*member ? "true" : "false");
                   }});
  };
  auto bind_u64 = [&out](const char* key, uint64_t Config::*member) {
    out.push_back({key,
                   [key, member](Config& c, const std::string& v) {
                     c.*member = parse_u64(key, v);
                   },
                   [member](const Config& c) { return std::to_string(c.*member); }});
  };
  auto bind_string = [&out](const char* key, std::string Config::*member) {
    out.push_back({key,
                   [member](Config& c, const std::string& v) { c.*member = v; },
                   [member](const Config& c) { return c.*member; }});
  };

  bind_int("world.classes", &Config::world_classes);
  bind_int("world.frames", &Config::world_frames);
  bind_int("world.height", &Config::world_height);
  bind_int("world.width", &Config::world_width);
  bind_double("world.sigma_render", &Config::world_sigma_render);
  bind_string("world.seed", &Config::world_seed);

  bind_double("data.corruption_p", &Config::data_corruption_p);
  bind_int("data.max_attempts", &Config::data_max_attempts);
  bind_string("data.seed", &Config::data_seed);
  bind_int("data.pretrain_img", &Config::data_pretrain_img);
  bind_int("data.pretrain_mix", &Config::data_pretrain_mix);
  bind_int("data.pretrain_vid", &Config::data_pretrain_vid);
  bind_int("data.sft", &Config::data_sft);
  bind_int("data.rl", &Config::data_rl);
  bind_int("data.test", &Config::data_test);

  bind_int("net.d_enc", &Config::net_d_enc);
  bind_int("net.d_mid", &Config::net_d_mid);
  bind_int("net.d_cond", &Config::net_d_cond);
  bind_int("net.queries", &Config::net_queries);
  bind_int("net.d_time", &Config::net_d_time);
  bind_int("net.d_frame", &Config::net_d_frame);
  bind_int("net.hidden", &Config::net_hidden);
  bind_int("net.n_frozen", &Config::net_n_frozen);
  bind_int("net.l_max", &Config::net_l_max);
  bind_double("net.eps_norm", &Config::net_eps_norm);
  bind_double("net.cond_dropout", &Config::net_cond_dropout);
  bind_string("net.encoder_seed", &Config::net_encoder_seed);

  bind_int("sampler.steps", &Config::sampler_steps);
  bind_double("sampler.eta", &Config::sampler_eta);
  bind_double("sampler.guidance", &Config::sampler_guidance);

  bind_double("optim.beta1", &Config::optim_beta1);
  bind_double("optim.beta2", &Config::optim_beta2);
  bind_double("optim.eps", &Config::optim_eps);
  bind_double("optim.weight_decay", &Config::optim_weight_decay);

  bind_int("stage1.epochs", &Config::stage1_epochs);
  bind_int("stage1.batch", &Config::stage1_batch);
  bind_double("stage1.lr", &Config::stage1_lr);
  bind_int("stage2.epochs", &Config::stage2_epochs);
  bind_int("stage2.batch", &Config::stage2_batch);
  bind_double("stage2.lr", &Config::stage2_lr);
  bind_int("stage3.epochs", &Config::stage3_epochs);
  bind_int("stage3.batch", &Config::stage3_batch);
  bind_double("stage3.lr", &Config::stage3_lr);

  bind_int("sft.epochs", &Config::sft_epochs);
  bind_int("sft.batch", &Config::sft_batch);
  bind_double("sft.lr", &Config::sft_lr);

  bind_int("grpo.group_size", &Config::grpo_group_size);
  bind_int("grpo.select_top", &Config::grpo_select_top);
  bind_int("grpo.select_bottom", &Config::grpo_select_bottom);
  bind_double("grpo.clip", &Config::grpo_clip);
  bind_int("grpo.groups_per_step", &Config::grpo_groups_per_step);
  bind_int("grpo.steps", &Config::grpo_steps);
  bind_double("grpo.lr", &Config::grpo_lr);
  bind_double("grpo.eps_std", &Config::grpo_eps_std);
  bind_double("grpo.kl_coef", &Config::grpo_kl_coef);
  bind_int("grpo.val_every", &Config::grpo_val_every);
  bind_int("grpo.val_records", &Config::grpo_val_records);
  bind_int("grpo.checkpoint_every", &Config::grpo_checkpoint_every);
  bind_int("grpo.rollout_steps", &Config::grpo_rollout_steps);
  bind_double("grpo.eta", &Config::grpo_eta);
  bind_double("grpo.guidance", &Config::grpo_guidance);

  bind_int("eval.t2v_samples", &Config::eval_t2v_samples);
  bind_string("eval.seed", &Config::eval_seed);

  bind_bool("pipeline.ablate_wo_pt", &Config::pipeline_ablate_wo_pt);

  bind_u64("run.seed", &Config::run_seed);
  bind_int("run.threads", &Config::run_threads);
  bind_string("run.out_dir", &Config::run_out_dir);

  std::sort(out.begin(), out.end(),
            [](const KeyBinding& a, const KeyBinding& b) { return a.key < b.key; });
  return out;
}

inline const std::vector<KeyBinding>& bindings() {
  static const std::vector<KeyBinding> table = make_bindings();
  return table;
}

}  // namespace detail

inline void Config::set(const std::string& key, const std::string& value) {
  for (const auto& b : detail::bindings()) {
    if (b.key == key) {
      b.set(*this, detail::trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key: " + key);
}

inline void Config::apply_overrides(const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override must look like key=value, got '" + a + "'");
    set(detail::trim(a.substr(0, eq)), a.substr(eq + 1));
  }
}

inline std::string Config::resolved_text() const {
  std::string out;
  for (const auto& b : detail::bindings())  // already sorted by key
    out += b.key + " = " + b.get(*this) + "\n";
  return out;
}

inline uint64_t Config::resolve_seed(const std::string& raw, const char* label) const {
  if (raw == "auto") return derive(run_seed, fnv1a(label));
  return detail::parse_u64(label, raw);
}

inline Config parse_config_text(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    lineno++;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line.resize(hash_pos);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) +
                        ": expected 'key = value', got '" + line + "'");
    cfg.set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return cfg;
}

inline Config load_config(const std::string& path) {
  std::vector<char> bytes;
  try {
    bytes = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse_config_text(std::string(bytes.begin(), bytes.end()));
}

inline void Config::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  require(world_classes >= 3, "world.classes must be >= 3");
  require(world_frames >= 2, "world.frames must be >= 2");
  require(world_height >= 1 && world_width >= 1, "world dims must be >= 1");
  require(world_sigma_render >= 0.0, "world.sigma_render must be >= 0");
  require(data_corruption_p >= 0.0 && data_corruption_p <= 1.0,
          "data.corruption_p must lie in [0, 1]");
  require(data_max_attempts >= 1, "data.max_attempts must be >= 1");
  require(data_pretrain_img >= 1 && data_pretrain_mix >= 1 &&
              data_pretrain_vid >= 1 && data_sft >= 1 && data_rl >= 1 &&
              data_test >= 1,
          "every data split size must be >= 1");
  require(net_d_enc >= 1 && net_d_mid >= 1 && net_d_cond >= 1 &&
              net_queries >= 1 && net_d_time >= 1 && net_d_frame >= 1 &&
              net_hidden >= 1,
          "net dims must be >= 1");
  require(net_n_frozen >= 0, "net.n_frozen must be >= 0");
  require(net_l_max >= net_queries + 2,
          "net.l_max must cover the queries plus a two-token prompt");
  require(net_eps_norm > 0.0, "net.eps_norm must be > 0");
  require(net_cond_dropout >= 0.0 && net_cond_dropout < 1.0,
          "net.cond_dropout must lie in [0, 1)");
  require(sampler_steps >= 1, "sampler.steps must be >= 1");
  require(sampler_eta >= 0.0, "sampler.eta must be >= 0");
  require(sampler_guidance >= 0.0, "sampler.guidance must be >= 0");
  require(optim_beta1 >= 0.0 && optim_beta1 < 1.0, "optim.beta1 must lie in [0, 1)");
  require(optim_beta2 >= 0.0 && optim_beta2 < 1.0, "optim.beta2 must lie in [0, 1)");
  require(optim_eps > 0.0, "optim.eps must be > 0");
  require(optim_weight_decay >= 0.0, "optim.weight_decay must be >= 0");
  require(stage1_epochs >= 1 && stage2_epochs >= 1 && stage3_epochs >= 1 &&
              sft_epochs >= 1,
          "stage epochs must be >= 1");
  require(stage1_batch >= 1 && stage2_batch >= 1 && stage3_batch >= 1 &&
              sft_batch >= 1,
          "stage batch sizes must be >= 1");
  require(stage1_lr > 0.0 && stage2_lr > 0.0 && stage3_lr > 0.0 && sft_lr > 0.0,
          "stage learning rates must be > 0");
  require(grpo_group_size >= 2, "grpo.group_size must be >= 2");
  require(grpo_select_top >= 1 && grpo_select_bottom >= 1,
          "grpo selection counts must be >= 1");
  require(grpo_select_top + grpo_select_bottom <= grpo_group_size,
          "grpo.select_top + grpo.select_bottom must be <= grpo.group_size");
  require(grpo_clip > 0.0 && grpo_clip < 1.0, "grpo.clip must lie in (0, 1)");
  require(grpo_groups_per_step >= 1, "grpo.groups_per_step must be >= 1");
  require(grpo_steps >= 1, "grpo.steps must be >= 1");
  require(grpo_lr > 0.0, "grpo.lr must be > 0");
  require(grpo_eps_std > 0.0, "grpo.eps_std must be > 0");
  require(grpo_kl_coef >= 0.0, "grpo.kl_coef must be >= 0");
  require(grpo_val_every >= 1, "grpo.val_every must be >= 1");
  require(grpo_val_records >= 1, "grpo.val_records must be >= 1");
  require(grpo_checkpoint_every >= 1, "grpo.checkpoint_every must be >= 1");
  require(grpo_rollout_steps >= 2,
          "grpo.rollout_steps must be >= 2 (at least one stochastic step)");
  require(grpo_eta > 0.0, "grpo.eta must be > 0 for exploration");
  require(grpo_guidance >= 0.0, "grpo.guidance must be >= 0");
  require(eval_t2v_samples >= 1, "eval.t2v_samples must be >= 1");
  require(run_threads >= 0, "run.threads must be >= 0");
  require(!run_out_dir.empty(), "run.out_dir must not be empty");
  // Seed strings must be decimal or the literal "auto"; resolve now to check.
  resolved_world_seed();
  resolved_data_seed();
  resolved_encoder_seed();
  resolved_eval_seed();
}

}  // namespace nspforge
