// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

// Teacher-forced joint training. Each step runs the Reasoner once over the
// ground-truth sequences, fuses its latents into the Generator's input
// embeddings, runs the Generator once, and backpropagates a response-only
// cross-entropy through both models and the projection.

#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "flythinker/fusion.hpp"

namespace flythinker {

enum class Policy { flythinker, sft };

std::string to_string(Policy p);
Policy policy_from_string(const std::string& s);

// One serialized sample: prompt tokens followed by response tokens.
struct EncodedSample {
  std::vector<TokenId> tokens;
  std::size_t prompt_len = 0;
  std::uint32_t user_id = 0;
  std::uint32_t sample_id = 0;

  PromptLayout layout() const { return {prompt_len, tokens.size() - prompt_len}; }
};

struct TrainConfig {
  Policy policy = Policy::flythinker;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip_norm = 1.0;
  std::size_t batch_size = 8;
  std::size_t steps = 2000;
  std::uint64_t seed = 1;
  std::size_t eval_every = 200;
  std::size_t heldout_eval_samples = 64;

  void validate() const;
};

struct TrainMetrics {
  std::uint64_t step = 0;
  double train_loss = 0;
  double heldout_loss = std::numeric_limits<double>::quiet_NaN();
  double tokens_per_sec = 0;
  std::uint64_t forwards_per_step = 0;
};

// Right-padded batch of packed sequences, targets shifted by one.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> tokens;
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> prompt_lens;
  std::size_t real_tokens = 0;
};

inline constexpr TokenId kPadToken = 0;

Batch make_batch(std::span<const EncodedSample* const> samples, TokenId pad = kPadToken);

// Generator input row -> latent row mapping for a packed batch.
std::vector<std::int64_t> batch_enhancement_sources(const Batch& batch, Region region);

// response-only mean NLL graph. `latent_keep`, when given, has one flag per
// packed row; latents tapped at rows with flag 0 are dropped from fusion.
template <typename T>
Var joint_loss(Tape<T>& tape, const FlyThinkerModel<T>& model, const Batch& batch, Policy policy,
               const std::vector<std::uint8_t>* latent_keep = nullptr);

// Mean NLL over masked rows of a logits matrix.
template <typename T>
double compute_loss(const Tensor<T>& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask);

// Adam with global-norm clipping over every parameter group.
template <typename T>
class AdamOptimizer {
 public:
  struct Moments {
    Tensor<T> m;
    Tensor<T> v;
  };

  explicit AdamOptimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  // Returns the gradient norm before clipping.
  double step(FlyThinkerModel<T>& model);

  std::uint64_t steps() const noexcept { return t_; }
  void set_steps(std::uint64_t t) noexcept { t_ = t; }
  std::map<std::string, Moments>& moments() noexcept { return moments_; }
  const std::map<std::string, Moments>& moments() const noexcept { return moments_; }

 private:
  TrainConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

// Parameter groups in a fixed (name) order: generator, projection, reasoner.
template <typename T>
std::vector<std::pair<std::string, ParamStore<T>*>> parameter_groups(FlyThinkerModel<T>& model);
template <typename T>
std::vector<std::pair<std::string, const ParamStore<T>*>> parameter_groups(const FlyThinkerModel<T>& model);

// Forward, backward and one optimizer update on `batch`.
template <typename T>
TrainMetrics train_step(FlyThinkerModel<T>& model, AdamOptimizer<T>& optimizer,
                        std::span<const EncodedSample* const> batch, const TrainConfig& cfg);

template <typename T>
class Trainer {
 public:
  Trainer(FlyThinkerModel<T> model, TrainConfig cfg);

  // Draws a batch from `train` and runs train_step.
  TrainMetrics step(std::span<const EncodedSample> train);
  // Token-weighted mean response NLL.
  double evaluate(std::span<const EncodedSample> samples) const;

  const FlyThinkerModel<T>& model() const noexcept { return model_; }
  FlyThinkerModel<T>& model() noexcept { return model_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  AdamOptimizer<T>& optimizer() noexcept { return opt_; }
  const AdamOptimizer<T>& optimizer() const noexcept { return opt_; }
  std::uint64_t steps_done() const noexcept { return step_; }
  void set_steps_done(std::uint64_t s) noexcept { step_ = s; }

  std::string rng_state() const;
  void set_rng_state(const std::string& state);

 private:
  FlyThinkerModel<T> model_;
  TrainConfig cfg_;
  AdamOptimizer<T> opt_;
  std::mt19937_64 rng_;
  std::uint64_t step_ = 0;
};

// Runs steps until `until_step`, emitting a metrics row at step 0 (when
// starting fresh) and at every multiple of eval_every.
std::vector<TrainMetrics> run_training(Trainer<float>& trainer, std::span<const EncodedSample> train,
                                       std::span<const EncodedSample> heldout, std::uint64_t until_step,
                                       const std::function<void(const TrainMetrics&)>& on_row = {});

inline constexpr const char* kMetricsCsvHeader = "step,train_loss,heldout_loss,tokens_per_sec,forwards_per_step";
void write_metrics_csv(const std::string& path, std::span<const TrainMetrics> rows, const std::string& config_hash);

struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst_parameter;
  std::size_t checked = 0;
  std::map<std::string, double> max_rel_error_by_group;
};

// Central finite differences over every parameter scalar in all groups.
GradCheckReport grad_check_joint(FlyThinkerModel<double>& model, std::span<const EncodedSample* const> batch,
                                 Policy policy = Policy::flythinker, double h = 1e-5, double floor = 1e-6);

}  // namespace flythinker
