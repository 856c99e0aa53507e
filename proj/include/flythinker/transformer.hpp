// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

// Decoder-only causal transformer (pre-layernorm blocks, learned absolute
// positions). The same model type serves as Reasoner and Generator: the
// Reasoner is read through its top hidden state, the Generator through its
// logits over externally supplied input embeddings.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flythinker/autodiff.hpp"

namespace flythinker {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 512;
  std::size_t max_len = 256;
  bool tie_unembed = false;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Instrumentation: number of full-sequence forward passes and incremental
// steps run against a parameter set.
struct ForwardCounters {
  std::uint64_t full_passes = 0;
  std::uint64_t incremental_steps = 0;
};

template <typename T>
struct TransformerParams {
  ModelConfig config;
  ParamStore<T> store;
  mutable ForwardCounters counters;

  // Weight matrices ~ N(0, 0.02^2), biases zero, layernorm gains one.
  static TransformerParams init(const ModelConfig& config, std::uint64_t seed);

  std::size_t parameter_count() const { return store.parameter_count(); }

  template <typename U>
  TransformerParams<U> cast() const {
    return TransformerParams<U>{config, store.template cast<U>(), {}};
  }
};

// Per-layer keys and values for the positions processed so far. Copying a
// cache snapshots it.
template <typename T>
class DecodeCache {
 public:
  DecodeCache() = default;
  explicit DecodeCache(const ModelConfig& config);

  std::size_t length() const noexcept { return length_; }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t layers() const noexcept { return keys_.size(); }

  const T* key(std::size_t layer, std::size_t pos) const { return keys_[layer].data() + pos * width_; }
  const T* value(std::size_t layer, std::size_t pos) const { return values_[layer].data() + pos * width_; }
  T* key(std::size_t layer, std::size_t pos) { return keys_[layer].data() + pos * width_; }
  T* value(std::size_t layer, std::size_t pos) { return values_[layer].data() + pos * width_; }

  // Marks `n` more positions as filled; the caller has written their rows.
  void advance(std::size_t n);

 private:
  std::vector<std::vector<T>> keys_;
  std::vector<std::vector<T>> values_;
  std::size_t length_ = 0;
  std::size_t capacity_ = 0;
  std::size_t width_ = 0;
};

template <typename T>
struct StepOutput {
  Tensor<T> hidden;  // [1 x d_model], after the final layernorm
  Tensor<T> logits;  // [1 x vocab], empty when not requested
};

template <typename T>
struct PrefillOutput {
  Tensor<T> hidden;       // [N x d_model]
  Tensor<T> last_logits;  // [1 x vocab]
};

// --- graph builders (used by training and by the full-sequence paths) ------

// Token-embedding rows, no positions. Throws VocabularyError on bad ids.
template <typename T>
Var embed_tokens(Tape<T>& tape, const TransformerParams<T>& params, std::span<const TokenId> tokens);

// Runs the blocks over `content` ([batch*seq_len x d_model] packed
// sequences), adding positional embeddings internally. Returns the
// post-final-layernorm hidden state. When `capture` is non-null (batch must
// be 1) the per-layer keys/values are written into it.
template <typename T>
Var hidden_states(Tape<T>& tape, const TransformerParams<T>& params, Var content, std::size_t seq_len,
                  DecodeCache<T>* capture = nullptr);

template <typename T>
Var unembed(Tape<T>& tape, const TransformerParams<T>& params, Var hidden);

// --- value-level API --------------------------------------------------------

template <typename T>
Tensor<T> token_embeddings(const TransformerParams<T>& params, std::span<const TokenId> tokens);

template <typename T>
Tensor<T> forward_hidden(const TransformerParams<T>& params, std::span<const TokenId> tokens);

template <typename T>
Tensor<T> forward_logits(const TransformerParams<T>& params, std::span<const TokenId> tokens);

// Logits for pre-fused input embeddings; positions are added inside.
// `seq_len` splits the rows into independent packed sequences (0 = one
// sequence spanning every row).
template <typename T>
Tensor<T> forward_logits_from_embeddings(const TransformerParams<T>& params, const Tensor<T>& emb,
                                         std::size_t seq_len = 0);

// Full-sequence pass over `emb` that also fills an empty cache.
template <typename T>
PrefillOutput<T> prefill(const TransformerParams<T>& params, DecodeCache<T>& cache, const Tensor<T>& emb);

// One cached position. `new_emb` is the content embedding (d_model values)
// of the next position.
template <typename T>
StepOutput<T> incremental_step(const TransformerParams<T>& params, DecodeCache<T>& cache,
                               std::span<const T> new_emb, bool with_logits = true);

}  // namespace flythinker
