// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

// Reasoner/Generator composition. The Reasoner's top hidden state at input
// position j becomes a latent vector that is added (scaled by lambda) to the
// Generator's input embedding at position j + 1. The one-position lag is what
// lets both models step concurrently at inference time.

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flythinker/transformer.hpp"

namespace flythinker {

enum class Region { global, input_only, output_only };

std::string to_string(Region r);
Region region_from_string(const std::string& s);

struct FusionConfig {
  double lambda = 0.5;
  Region region = Region::global;

  friend bool operator==(const FusionConfig&, const FusionConfig&) = default;
};

// The lambda sweep used for sensitivity runs.
inline constexpr double kLambdaSweep[] = {0.0, 0.2, 0.5, 1.0, 1.5, 2.0, 5.0};

struct PromptLayout {
  std::size_t prompt_len = 0;
  std::size_t response_len = 0;
  std::size_t total() const noexcept { return prompt_len + response_len; }
  void validate() const;
};

template <typename T>
struct LatentThoughts {
  Tensor<T> vectors;                       // [count x d_G], already projected
  std::vector<std::size_t> source_positions;  // input position each row was tapped from
};

// Whether the Generator input at `position` receives a latent.
bool is_enhanced(std::size_t position, std::size_t prompt_len, Region region);

// For each of `n` Generator input rows, the latent row to add (position - 1)
// or -1. Positions >= valid_len (padding) are never enhanced.
std::vector<std::int64_t> enhancement_sources(std::size_t n, std::size_t prompt_len, Region region,
                                              std::size_t valid_len);

inline constexpr const char* kProjectionWeight = "weight";

// Reasoner + Generator + optional width bridge, i.e. the three trainable
// parameter groups.
template <typename T>
struct FlyThinkerModel {
  TransformerParams<T> generator;
  TransformerParams<T> reasoner;
  // [d_R x d_G], present iff the widths differ.
  std::optional<ParamStore<T>> projection;
  FusionConfig fusion;

  static FlyThinkerModel init(const ModelConfig& generator, const ModelConfig& reasoner, const FusionConfig& fusion,
                              std::uint64_t seed);
  void validate() const;
  const ParamStore<T>* projection_store() const { return projection ? &*projection : nullptr; }

  template <typename U>
  FlyThinkerModel<U> cast() const {
    FlyThinkerModel<U> m{generator.template cast<U>(), reasoner.template cast<U>(), std::nullopt, fusion};
    if (projection) m.projection = projection->template cast<U>();
    return m;
  }
};

// Seeds of the parameter groups are derived from one run seed so that the
// Generator of a joint run and of a Generator-only run start identical.
std::uint64_t group_seed(std::uint64_t seed, const std::string& group);

// --- value-level ops --------------------------------------------------------

template <typename T>
Tensor<T> project_latent(const Tensor<T>& r, const Tensor<T>& w);

// One Reasoner pass over `tokens`; returns the (projected) states tapped at
// positions 0..N-2.
template <typename T>
LatentThoughts<T> reason_all(const TransformerParams<T>& reasoner, const ParamStore<T>* projection,
                             std::span<const TokenId> tokens);
template <typename T>
LatentThoughts<T> reason_all(const FlyThinkerModel<T>& model, std::span<const TokenId> tokens) {
  return reason_all(model.reasoner, model.projection_store(), tokens);
}

// Feeds one more token through the Reasoner cache and returns the projected
// latent at that position.
template <typename T>
Tensor<T> reason_step(const TransformerParams<T>& reasoner, const ParamStore<T>* projection, DecodeCache<T>& cache,
                      TokenId token);

// fused[i] = token_emb[i] + lambda * latent[i-1] inside the region.
template <typename T>
Tensor<T> fuse(const Tensor<T>& token_emb, const LatentThoughts<T>& latents, const FusionConfig& cfg,
               const PromptLayout& layout);

// Full pipeline on one sequence: latents, fusion, Generator logits [N x V].
template <typename T>
Tensor<T> pipeline_logits(const FlyThinkerModel<T>& model, std::span<const TokenId> tokens, std::size_t prompt_len);

// --- graph builders ---------------------------------------------------------

// Projected Reasoner states for packed sequences [batch*seq_len x d_G].
template <typename T>
Var latent_graph(Tape<T>& tape, const FlyThinkerModel<T>& model, std::span<const TokenId> tokens, std::size_t seq_len);

template <typename T>
Var fuse_graph(Tape<T>& tape, Var token_emb, Var latents, std::span<const std::int64_t> sources, double lambda);

}  // namespace flythinker
