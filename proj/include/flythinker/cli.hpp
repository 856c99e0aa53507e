// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

// Run-level workflows shared by the command-line tool, the acceptance suite
// and the Python bindings.

#pragma once

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "flythinker/checkpoint.hpp"
#include "flythinker/config.hpp"
#include "flythinker/metrics.hpp"

namespace flythinker {

struct Workspace {
  RunConfig config;
  std::string hash;
  Corpus corpus;
  std::vector<EncodedSample> train;
  std::vector<EncodedSample> heldout;
};

// Loads the dataset from paths.dataset_dir, generating and writing it first
// when absent.
Workspace open_workspace(const RunConfig& cfg);
Workspace make_workspace(const RunConfig& cfg, Corpus corpus);

FlyThinkerModel<float> init_model(const RunConfig& cfg);

struct TrainRun {
  std::vector<TrainMetrics> rows;
  Checkpoint checkpoint;
};

// Trains up to cfg.train.steps. With `resume`, training continues from that
// checkpoint; a config-hash mismatch raises unless `allow_mismatch`.
TrainRun train_run(const RunConfig& cfg, std::span<const EncodedSample> train, std::span<const EncodedSample> heldout,
                   const Checkpoint* resume = nullptr, bool allow_mismatch = false,
                   const std::function<void(const TrainMetrics&)>& on_row = {});

struct SweepRow {
  double lambda = 0;
  std::uint64_t steps = 0;
  double train_loss = 0;
  double heldout_loss = 0;
};
inline constexpr const char* kSweepCsvHeader = "lambda,steps,train_loss,heldout_loss";

std::vector<SweepRow> lambda_sweep(const RunConfig& cfg, std::span<const EncodedSample> train,
                                   std::span<const EncodedSample> heldout, std::span<const double> lambdas);
std::string sweep_csv(const std::vector<SweepRow>& rows, const std::string& config_hash);

// Greedy-decodes up to `n` held-out prompts and scores the responses in k
// position segments. SFT checkpoints decode with the Generator alone.
SegmentedScores evaluate_model(const FlyThinkerModel<float>& model, Policy policy,
                               std::span<const EncodedSample> samples, std::size_t n, const DecodeConfig& decode,
                               std::size_t k = 4);

struct GradCheckCase {
  std::string name;
  GradCheckReport report;
  bool reasoner_grad_zero_at_lambda0 = false;
};
// Tiny double-precision models: one with matched widths, one bridged by a
// projection.
std::vector<GradCheckCase> grad_check_suite(std::uint64_t seed);

// Entry point of the `flythinker` tool. Exit codes: 0 ok, 1 runtime
// failure, 2 usage error, 3 validation error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

}  // namespace flythinker
