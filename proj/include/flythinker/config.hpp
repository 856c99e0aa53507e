// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "flythinker/corpus.hpp"
#include "flythinker/decoder.hpp"
#include "flythinker/trainer.hpp"

namespace flythinker {

struct BenchConfig {
  std::size_t n_prompts = 10;
  std::size_t prompt_len = 32;  // leading tokens of each held-out sample
  std::size_t max_steps = 256;
  std::size_t warmup = 3;
  std::size_t micro_repeats = 50;
};

// Output locations; relative paths resolve against output_dir.
struct PathsConfig {
  std::string dataset_dir = "data";
  std::string checkpoint = "checkpoint.ftck";
  std::string metrics_csv = "metrics.csv";
  std::string bench_csv = "bench.csv";
  std::string transcript = "transcript.txt";
  std::string latents_csv = "latents.csv";
  std::string eval_csv = "eval.csv";
  std::string sweep_csv = "lambda_sweep.csv";
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  CorpusConfig corpus;
  ModelConfig generator{4, 4, 128, 512, 512, 640, false};
  ModelConfig reasoner{2, 2, 64, 256, 512, 640, false};
  FusionConfig fusion;
  TrainConfig train;
  DecodeConfig decode{128, DecodeMode::greedy, 1.0, 0, Vocabulary::kEos, 30.0};
  std::size_t decode_samples = 8;  // held-out prompts decoded by `decode` and `eval`
  BenchConfig bench;
  PathsConfig paths;

  void validate() const;
  std::string path(const std::string& p) const;  // resolved against output_dir
};

// Strict parse: unknown keys and wrong types raise ConfigError. Missing keys
// keep their defaults. FT_OUTPUT_DIR, when set, replaces output_dir.
RunConfig parse_run_config(const std::string& json_text, bool apply_env = true);
RunConfig load_run_config(const std::string& path, bool apply_env = true);
std::string run_config_json(const RunConfig& c);

// Hash of everything that determines results; paths, output_dir, the step
// budget and the evaluation cadence are excluded.
std::string config_hash(const RunConfig& c);

}  // namespace flythinker
