// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#include "flythinker/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <set>

#include "flythinker/io.hpp"
#include "json.hpp"

namespace flythinker {

using json = nlohmann::json;

namespace {

// Reads keys from one JSON object and remembers which were consumed.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("'" + name_ + "' must be an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_unsigned_v<V> && !std::is_same_v<V, bool>) {
        if (!it->is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
      } else if constexpr (std::is_same_v<V, bool>) {
        if (!it->is_boolean()) throw ConfigError(where(key) + " must be a boolean");
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!it->is_number()) throw ConfigError(where(key) + " must be a number");
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!it->is_string()) throw ConfigError(where(key) + " must be a string");
      }
      out = it->template get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + where(it.key().c_str()) + "'");
    }
  }

  std::string where(const char* key) const { return name_.empty() ? key : name_ + "." + key; }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

void read_model(const json& j, const std::string& name, ModelConfig& m) {
  Section s(j, name);
  s.get("n_layers", m.n_layers);
  s.get("n_heads", m.n_heads);
  s.get("d_model", m.d_model);
  s.get("d_ff", m.d_ff);
  s.get("vocab_size", m.vocab_size);
  s.get("max_len", m.max_len);
  s.get("tie_unembed", m.tie_unembed);
  s.finish();
}

json model_json(const ModelConfig& m) {
  return {{"n_layers", m.n_layers}, {"n_heads", m.n_heads},       {"d_model", m.d_model},
          {"d_ff", m.d_ff},         {"vocab_size", m.vocab_size}, {"max_len", m.max_len},
          {"tie_unembed", m.tie_unembed}};
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["corpus"] = {{"n_users", c.corpus.n_users},
                 {"samples_per_user", c.corpus.samples_per_user},
                 {"style_space", c.corpus.style_space},
                 {"history_len", c.corpus.history_len},
                 {"heldout_fraction", c.corpus.heldout_fraction}};
  j["generator"] = model_json(c.generator);
  j["reasoner"] = model_json(c.reasoner);
  j["fusion"] = {{"lambda", c.fusion.lambda}, {"region", to_string(c.fusion.region)}};
  const auto& t = c.train;
  j["train"] = {{"policy", to_string(t.policy)},
                {"learning_rate", t.learning_rate},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"eps", t.eps},
                {"grad_clip_norm", t.grad_clip_norm},
                {"batch_size", t.batch_size},
                {"steps", t.steps},
                {"eval_every", t.eval_every},
                {"heldout_eval_samples", t.heldout_eval_samples}};
  const auto& d = c.decode;
  j["decode"] = {{"max_steps", d.max_steps},
                 {"mode", to_string(d.mode)},
                 {"temperature", d.temperature},
                 {"seed", d.seed},
                 {"stop_token", d.stop_token ? json(*d.stop_token) : json(nullptr)},
                 {"rendezvous_timeout_s", d.rendezvous_timeout_s},
                 {"samples", c.decode_samples}};
  j["bench"] = {{"n_prompts", c.bench.n_prompts},
                {"prompt_len", c.bench.prompt_len},
                {"max_steps", c.bench.max_steps},
                {"warmup", c.bench.warmup},
                {"micro_repeats", c.bench.micro_repeats}};
  const auto& p = c.paths;
  j["paths"] = {{"dataset_dir", p.dataset_dir}, {"checkpoint", p.checkpoint},   {"metrics_csv", p.metrics_csv},
                {"bench_csv", p.bench_csv},     {"transcript", p.transcript},   {"latents_csv", p.latents_csv},
                {"eval_csv", p.eval_csv},       {"sweep_csv", p.sweep_csv}};
  return j;
}

}  // namespace

void RunConfig::validate() const {
  corpus.validate();
  generator.validate();
  reasoner.validate();
  if (generator.vocab_size != reasoner.vocab_size) throw ConfigError("generator and reasoner vocab_size must match");
  const std::size_t vocab = Vocabulary::standard().size();
  if (generator.vocab_size < vocab) {
    throw ConfigError("vocab_size " + std::to_string(generator.vocab_size) + " is smaller than the corpus vocabulary (" +
                      std::to_string(vocab) + " words)");
  }
  if (!(fusion.lambda >= 0)) throw ConfigError("fusion.lambda must be >= 0");
  train.validate();
  decode.validate();
  if (bench.n_prompts < 1) throw ConfigError("bench.n_prompts must be >= 1");
  if (bench.prompt_len < 1) throw ConfigError("bench.prompt_len must be >= 1");
  if (bench.max_steps < 1) throw ConfigError("bench.max_steps must be >= 1");
  if (decode_samples < 1) throw ConfigError("decode.samples must be >= 1");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

std::string RunConfig::path(const std::string& p) const {
  const std::filesystem::path fp(p);
  return fp.is_absolute() ? p : (std::filesystem::path(output_dir) / fp).string();
}

RunConfig parse_run_config(const std::string& text, bool apply_env) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Section root(j, "");
  root.get("seed", c.seed);
  root.get("output_dir", c.output_dir);
  if (const json* s = root.child("corpus")) {
    Section x(*s, "corpus");
    x.get("n_users", c.corpus.n_users);
    x.get("samples_per_user", c.corpus.samples_per_user);
    x.get("style_space", c.corpus.style_space);
    x.get("history_len", c.corpus.history_len);
    x.get("heldout_fraction", c.corpus.heldout_fraction);
    x.finish();
  }
  if (const json* s = root.child("generator")) read_model(*s, "generator", c.generator);
  if (const json* s = root.child("reasoner")) read_model(*s, "reasoner", c.reasoner);
  if (const json* s = root.child("fusion")) {
    Section x(*s, "fusion");
    x.get("lambda", c.fusion.lambda);
    std::string region = to_string(c.fusion.region);
    x.get("region", region);
    c.fusion.region = region_from_string(region);
    x.finish();
  }
  if (const json* s = root.child("train")) {
    Section x(*s, "train");
    std::string policy = to_string(c.train.policy);
    x.get("policy", policy);
    c.train.policy = policy_from_string(policy);
    x.get("learning_rate", c.train.learning_rate);
    x.get("beta1", c.train.beta1);
    x.get("beta2", c.train.beta2);
    x.get("eps", c.train.eps);
    x.get("grad_clip_norm", c.train.grad_clip_norm);
    x.get("batch_size", c.train.batch_size);
    x.get("steps", c.train.steps);
    x.get("eval_every", c.train.eval_every);
    x.get("heldout_eval_samples", c.train.heldout_eval_samples);
    x.finish();
  }
  if (const json* s = root.child("decode")) {
    Section x(*s, "decode");
    x.get("max_steps", c.decode.max_steps);
    std::string mode = to_string(c.decode.mode);
    x.get("mode", mode);
    c.decode.mode = decode_mode_from_string(mode);
    x.get("temperature", c.decode.temperature);
    x.get("seed", c.decode.seed);
    if (const json* st = x.child("stop_token")) {
      if (st->is_null()) {
        c.decode.stop_token.reset();
      } else if (st->is_number_integer()) {
        c.decode.stop_token = st->get<TokenId>();
      } else {
        throw ConfigError("decode.stop_token must be an integer or null");
      }
    }
    x.get("rendezvous_timeout_s", c.decode.rendezvous_timeout_s);
    x.get("samples", c.decode_samples);
    x.finish();
  }
  if (const json* s = root.child("bench")) {
    Section x(*s, "bench");
    x.get("n_prompts", c.bench.n_prompts);
    x.get("prompt_len", c.bench.prompt_len);
    x.get("max_steps", c.bench.max_steps);
    x.get("warmup", c.bench.warmup);
    x.get("micro_repeats", c.bench.micro_repeats);
    x.finish();
  }
  if (const json* s = root.child("paths")) {
    Section x(*s, "paths");
    auto& p = c.paths;
    x.get("dataset_dir", p.dataset_dir);
    x.get("checkpoint", p.checkpoint);
    x.get("metrics_csv", p.metrics_csv);
    x.get("bench_csv", p.bench_csv);
    x.get("transcript", p.transcript);
    x.get("latents_csv", p.latents_csv);
    x.get("eval_csv", p.eval_csv);
    x.get("sweep_csv", p.sweep_csv);
    x.finish();
  }
  root.finish();

  c.corpus.seed = c.seed;
  c.train.seed = c.seed;
  if (apply_env) {
    if (const char* env = std::getenv("FT_OUTPUT_DIR"); env && *env) c.output_dir = env;
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path, bool apply_env) { return parse_run_config(read_file(path), apply_env); }

std::string run_config_json(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

std::string config_hash(const RunConfig& c) {
  json j = to_json(c);
  j.erase("paths");
  j.erase("output_dir");
  j["train"].erase("steps");
  j["train"].erase("eval_every");
  return hex64(fnv1a64(j.dump()));
}

}  // namespace flythinker
