// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

// Inference. The sequential decoder is the reference; the staggered decoder
// runs the Generator on the calling thread and the Reasoner on a second
// thread, exchanging one token and one latent per emitted position.

#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flythinker/fusion.hpp"

namespace flythinker {

enum class DecodeMode { greedy, sample };

std::string to_string(DecodeMode m);
DecodeMode decode_mode_from_string(const std::string& s);

struct DecodeConfig {
  std::size_t max_steps = 128;
  DecodeMode mode = DecodeMode::greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::optional<TokenId> stop_token;
  double rendezvous_timeout_s = 30.0;

  void validate() const;
};

using Nanos = std::chrono::nanoseconds;

struct WorkerInterval {
  int worker = 0;        // 0: generation worker, 1: reasoning worker
  std::size_t step = 0;  // emitted-token index the work belongs to
  Nanos start{0};
  Nanos end{0};
};

// Where the latent fused into one Generator input came from.
struct FusionProvenance {
  std::size_t generator_position = 0;
  std::int64_t latent_source = -1;     // Reasoner position, -1 when not enhanced
  std::size_t reasoner_tokens_seen = 0;  // tokens the Reasoner had consumed when it produced that latent
};

struct DecodeResult {
  std::vector<TokenId> tokens;
  std::vector<Nanos> per_step_latency;  // emission-to-emission; entry 0 includes prefill
  Nanos total_wall{0};
  std::size_t steps_executed = 0;       // Generator invocations, prefill included
  std::vector<WorkerInterval> worker_timeline;
  std::vector<FusionProvenance> provenance;
};

// Lowest index among the maxima.
template <typename T>
TokenId argmax_lowest(std::span<const T> logits);

DecodeResult decode_sequential(const FlyThinkerModel<float>& model, std::span<const TokenId> prompt,
                               const DecodeConfig& cfg);
DecodeResult decode_staggered(const FlyThinkerModel<float>& model, std::span<const TokenId> prompt,
                              const DecodeConfig& cfg);
DecodeResult decode_baseline_sft(const TransformerParams<float>& generator, std::span<const TokenId> prompt,
                                 const DecodeConfig& cfg);
// Runs n_latent Generator steps that feed back its own top hidden state, then
// decodes normally.
DecodeResult decode_baseline_seq_latent(const TransformerParams<float>& generator, std::span<const TokenId> prompt,
                                        std::size_t n_latent, const DecodeConfig& cfg);

// Fraction of steps whose generation and reasoning intervals overlap.
double timeline_overlap_fraction(const DecodeResult& r);

struct BenchRow {
  std::string policy;
  std::uint64_t params_G = 0;
  std::uint64_t params_R = 0;
  std::uint64_t N1 = 0;
  std::uint64_t N2 = 0;
  double C_G_us = 0;
  double C_R_us = 0;
  double ell_G_us = 0;
  double ell_R_us = 0;
  double total_ms = 0;

  friend bool operator==(const BenchRow&, const BenchRow&) = default;
};

struct BenchReport {
  std::vector<BenchRow> rows;  // sft, flythinker_staggered, sequential_latent
  // Median per-token latency of each policy (not part of the CSV).
  std::map<std::string, double> per_token_us;
  unsigned hardware_threads = 0;

  const BenchRow& row(const std::string& policy) const;
};

struct BenchOptions {
  std::size_t warmup = 3;
  std::size_t micro_repeats = 50;  // isolated single-step timings per prompt
};

BenchReport bench(const FlyThinkerModel<float>& model, std::span<const std::vector<TokenId>> prompts,
                  const DecodeConfig& cfg, const BenchOptions& opts = {});

inline constexpr const char* kBenchCsvHeader =
    "policy,params_G,params_R,N1,N2,C_G_us,C_R_us,ell_G_us,ell_R_us,total_ms";
std::string bench_csv(const BenchReport& report, const std::string& config_hash);
// Rows of a bench CSV; comment lines are skipped.
std::vector<BenchRow> parse_bench_csv(const std::string& text);

double median(std::vector<double> v);

}  // namespace flythinker
