// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#include "flythinker/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "kernels.hpp"

namespace flythinker {

namespace {

std::string block_name(std::size_t layer, const char* leaf) {
  return "block" + std::to_string(layer) + "." + leaf;
}

struct BlockNames {
  std::string ln1_gain, ln1_bias, qkv_w, qkv_b, out_w, out_b, ln2_gain, ln2_bias, fc_w, fc_b, proj_w, proj_b;

  explicit BlockNames(std::size_t l)
      : ln1_gain(block_name(l, "ln1.gain")),
        ln1_bias(block_name(l, "ln1.bias")),
        qkv_w(block_name(l, "attn.qkv.weight")),
        qkv_b(block_name(l, "attn.qkv.bias")),
        out_w(block_name(l, "attn.out.weight")),
        out_b(block_name(l, "attn.out.bias")),
        ln2_gain(block_name(l, "ln2.gain")),
        ln2_bias(block_name(l, "ln2.bias")),
        fc_w(block_name(l, "mlp.in.weight")),
        fc_b(block_name(l, "mlp.in.bias")),
        proj_w(block_name(l, "mlp.out.weight")),
        proj_b(block_name(l, "mlp.out.bias")) {}
};

constexpr const char* kTokEmb = "tok_emb";
constexpr const char* kPosEmb = "pos_emb";
constexpr const char* kFinalGain = "final_ln.gain";
constexpr const char* kFinalBias = "final_ln.bias";
constexpr const char* kUnembed = "unembed.weight";
constexpr double kLayerNormEps = 1e-5;

// Block names are rebuilt on every pass; cache them per layer count.
const std::vector<BlockNames>& block_names(std::size_t n_layers) {
  thread_local std::vector<BlockNames> names;
  while (names.size() < n_layers) names.emplace_back(names.size());
  return names;
}

void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
      throw VocabularyError("token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(c.vocab_size));
    }
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (n_heads < 1) throw ConfigError("n_heads must be >= 1");
  if (d_model < 1 || d_model % n_heads != 0) throw ConfigError("d_model must be a positive multiple of n_heads");
  if (d_ff < 1) throw ConfigError("d_ff must be >= 1");
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
}

template <typename T>
TransformerParams<T> TransformerParams<T>::init(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto weight = [&](Shape s) {
    Tensor<T> w(std::move(s));
    for (auto& v : w.values()) v = static_cast<T>(normal(rng));
    return w;
  };
  const std::size_t d = c.d_model;
  TransformerParams p;
  p.config = c;
  p.store.add(kTokEmb, weight({c.vocab_size, d}));
  p.store.add(kPosEmb, weight({c.max_len, d}));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const BlockNames n(l);
    p.store.add(n.ln1_gain, Tensor<T>({d}, T(1)));
    p.store.add(n.ln1_bias, Tensor<T>({d}));
    p.store.add(n.qkv_w, weight({d, 3 * d}));
    p.store.add(n.qkv_b, Tensor<T>({3 * d}));
    p.store.add(n.out_w, weight({d, d}));
    p.store.add(n.out_b, Tensor<T>({d}));
    p.store.add(n.ln2_gain, Tensor<T>({d}, T(1)));
    p.store.add(n.ln2_bias, Tensor<T>({d}));
    p.store.add(n.fc_w, weight({d, c.d_ff}));
    p.store.add(n.fc_b, Tensor<T>({c.d_ff}));
    p.store.add(n.proj_w, weight({c.d_ff, d}));
    p.store.add(n.proj_b, Tensor<T>({d}));
  }
  p.store.add(kFinalGain, Tensor<T>({d}, T(1)));
  p.store.add(kFinalBias, Tensor<T>({d}));
  if (!c.tie_unembed) p.store.add(kUnembed, weight({d, c.vocab_size}));
  return p;
}

template <typename T>
DecodeCache<T>::DecodeCache(const ModelConfig& c)
    : keys_(c.n_layers, std::vector<T>(c.max_len * c.d_model)),
      values_(c.n_layers, std::vector<T>(c.max_len * c.d_model)),
      capacity_(c.max_len),
      width_(c.d_model) {}

template <typename T>
void DecodeCache<T>::advance(std::size_t n) {
  if (length_ + n > capacity_) {
    throw CacheOverflowError("decode cache overflow: " + std::to_string(length_ + n) + " > max_len " +
                             std::to_string(capacity_));
  }
  length_ += n;
}

template <typename T>
Var embed_tokens(Tape<T>& tape, const TransformerParams<T>& params, std::span<const TokenId> tokens) {
  check_tokens(params.config, tokens);
  std::vector<std::int64_t> idx(tokens.begin(), tokens.end());
  return ad::gather_rows(tape, tape.parameter(params.store, kTokEmb), idx);
}

template <typename T>
Var hidden_states(Tape<T>& tape, const TransformerParams<T>& params, Var content, std::size_t seq_len,
                  DecodeCache<T>* capture) {
  const ModelConfig& c = params.config;
  const auto& in = tape.value(content);
  if (in.rank() != 2 || in.cols() != c.d_model) {
    throw DimensionError("input embeddings " + shape_string(in.shape()) + " do not match d_model " +
                         std::to_string(c.d_model));
  }
  if (seq_len == 0) seq_len = in.rows();
  if (in.rows() % seq_len != 0) throw DimensionError("rows are not a whole number of sequences");
  if (seq_len > c.max_len) {
    throw LengthError("sequence length " + std::to_string(seq_len) + " exceeds max_len " + std::to_string(c.max_len));
  }
  const std::size_t rows = in.rows();
  if (capture) {
    if (rows != seq_len) throw DimensionError("cache capture needs a single sequence");
    if (capture->length() != 0) throw DimensionError("cache capture needs an empty cache");
    if (capture->width() != c.d_model || capture->capacity() < seq_len) throw DimensionError("cache does not match model");
  }
  ++params.counters.full_passes;

  std::vector<std::int64_t> pos(rows);
  for (std::size_t r = 0; r < rows; ++r) pos[r] = static_cast<std::int64_t>(r % seq_len);
  Var x = ad::add_gathered_rows(tape, content, tape.parameter(params.store, kPosEmb), pos, 1.0);

  const auto& names = block_names(c.n_layers);
  const std::size_t d = c.d_model;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const BlockNames& n = names[l];
    const auto& S = params.store;
    Var h = ad::layer_norm(tape, x, tape.parameter(S, n.ln1_gain), tape.parameter(S, n.ln1_bias), kLayerNormEps);
    Var qkv = ad::linear(tape, h, tape.parameter(S, n.qkv_w), tape.parameter(S, n.qkv_b));
    if (capture) {
      const auto& q = tape.value(qkv);
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(q.data() + r * 3 * d + d, d, capture->key(l, r));
        std::copy_n(q.data() + r * 3 * d + 2 * d, d, capture->value(l, r));
      }
    }
    Var a = ad::causal_attention(tape, qkv, c.n_heads, seq_len);
    x = ad::add(tape, x, ad::linear(tape, a, tape.parameter(S, n.out_w), tape.parameter(S, n.out_b)));
    Var h2 = ad::layer_norm(tape, x, tape.parameter(S, n.ln2_gain), tape.parameter(S, n.ln2_bias), kLayerNormEps);
    Var f = ad::gelu(tape, ad::linear(tape, h2, tape.parameter(S, n.fc_w), tape.parameter(S, n.fc_b)));
    x = ad::add(tape, x, ad::linear(tape, f, tape.parameter(S, n.proj_w), tape.parameter(S, n.proj_b)));
  }
  if (capture) capture->advance(seq_len);
  return ad::layer_norm(tape, x, tape.parameter(params.store, kFinalGain), tape.parameter(params.store, kFinalBias),
                        kLayerNormEps);
}

template <typename T>
Var unembed(Tape<T>& tape, const TransformerParams<T>& params, Var hidden) {
  if (params.config.tie_unembed) return ad::matmul_nt(tape, hidden, tape.parameter(params.store, kTokEmb));
  return ad::matmul(tape, hidden, tape.parameter(params.store, kUnembed));
}

template <typename T>
Tensor<T> token_embeddings(const TransformerParams<T>& params, std::span<const TokenId> tokens) {
  check_tokens(params.config, tokens);
  const auto& E = params.store.value(kTokEmb);
  const std::size_t d = params.config.d_model;
  Tensor<T> out({tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::copy_n(E.data() + static_cast<std::size_t>(tokens[i]) * d, d, out.data() + i * d);
  }
  return out;
}

template <typename T>
Tensor<T> forward_hidden(const TransformerParams<T>& params, std::span<const TokenId> tokens) {
  if (tokens.size() > params.config.max_len) {
    throw LengthError("sequence length " + std::to_string(tokens.size()) + " exceeds max_len " +
                      std::to_string(params.config.max_len));
  }
  Tape<T> tape(false);
  Var h = hidden_states(tape, params, embed_tokens(tape, params, tokens), tokens.size());
  return tape.value(h);
}

template <typename T>
Tensor<T> forward_logits(const TransformerParams<T>& params, std::span<const TokenId> tokens) {
  if (tokens.size() > params.config.max_len) {
    throw LengthError("sequence length " + std::to_string(tokens.size()) + " exceeds max_len " +
                      std::to_string(params.config.max_len));
  }
  Tape<T> tape(false);
  Var h = hidden_states(tape, params, embed_tokens(tape, params, tokens), tokens.size());
  return tape.value(unembed(tape, params, h));
}

template <typename T>
Tensor<T> forward_logits_from_embeddings(const TransformerParams<T>& params, const Tensor<T>& emb, std::size_t seq_len) {
  Tape<T> tape(false);
  Var h = hidden_states(tape, params, tape.constant(emb), seq_len);
  return tape.value(unembed(tape, params, h));
}

template <typename T>
PrefillOutput<T> prefill(const TransformerParams<T>& params, DecodeCache<T>& cache, const Tensor<T>& emb) {
  Tape<T> tape(false);
  Var h = hidden_states(tape, params, tape.constant(emb), emb.rows(), &cache);
  PrefillOutput<T> out;
  out.hidden = tape.value(h);
  Var last = tape.constant(out.hidden.slice_rows(out.hidden.rows() - 1, out.hidden.rows()));
  out.last_logits = tape.value(unembed(tape, params, last));
  return out;
}

template <typename T>
StepOutput<T> incremental_step(const TransformerParams<T>& params, DecodeCache<T>& cache, std::span<const T> new_emb,
                               bool with_logits) {
  const ModelConfig& c = params.config;
  const std::size_t d = c.d_model;
  if (new_emb.size() != d) throw DimensionError("step embedding width " + std::to_string(new_emb.size()) + " != d_model");
  if (cache.width() != d || cache.layers() != c.n_layers) throw DimensionError("decode cache does not match model");
  const std::size_t pos = cache.length();
  if (pos >= c.max_len || pos >= cache.capacity()) {
    throw CacheOverflowError("incremental step at position " + std::to_string(pos) + " exceeds max_len " +
                             std::to_string(c.max_len));
  }
  ++params.counters.incremental_steps;

  const auto& S = params.store;
  const auto& P = S.value(kPosEmb);
  std::vector<T> x(d), h(d), qkv(3 * d), att(d), tmp(d), ff(c.d_ff), ff_th(c.d_ff);
  for (std::size_t j = 0; j < d; ++j) x[j] = new_emb[j] + T(1) * P.at(pos, j);

  const std::size_t hd = d / c.n_heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(hd));
  std::vector<T> scores(pos + 1);
  const auto& names = block_names(c.n_layers);
  const T eps = static_cast<T>(kLayerNormEps);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const BlockNames& n = names[l];
    kernels::layer_norm_row(d, x.data(), S.value(n.ln1_gain).data(), S.value(n.ln1_bias).data(), eps, h.data());
    kernels::vec_mat(d, 3 * d, h.data(), S.value(n.qkv_w).data(), S.value(n.qkv_b).data(), qkv.data());
    std::copy_n(qkv.data() + d, d, cache.key(l, pos));
    std::copy_n(qkv.data() + 2 * d, d, cache.value(l, pos));
    for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
      const T* q = qkv.data() + hh * hd;
      for (std::size_t j = 0; j <= pos; ++j) {
        const T* k = cache.key(l, j) + hh * hd;
        T s = 0;
        for (std::size_t i = 0; i < hd; ++i) s += q[i] * k[i];
        scores[j] = s;
      }
      kernels::softmax_row(pos + 1, scores.data(), sc, scores.data());
      T* o = att.data() + hh * hd;
      std::fill_n(o, hd, T(0));
      for (std::size_t j = 0; j <= pos; ++j) {
        const T p = scores[j];
        const T* v = cache.value(l, j) + hh * hd;
        for (std::size_t i = 0; i < hd; ++i) o[i] += p * v[i];
      }
    }
    kernels::vec_mat(d, d, att.data(), S.value(n.out_w).data(), S.value(n.out_b).data(), tmp.data());
    for (std::size_t j = 0; j < d; ++j) x[j] += tmp[j];
    kernels::layer_norm_row(d, x.data(), S.value(n.ln2_gain).data(), S.value(n.ln2_bias).data(), eps, h.data());
    kernels::vec_mat(d, c.d_ff, h.data(), S.value(n.fc_w).data(), S.value(n.fc_b).data(), ff.data());
    kernels::gelu(ff.size(), ff.data(), ff.data(), ff_th.data());
    kernels::vec_mat(c.d_ff, d, ff.data(), S.value(n.proj_w).data(), S.value(n.proj_b).data(), tmp.data());
    for (std::size_t j = 0; j < d; ++j) x[j] += tmp[j];
  }
  cache.advance(1);

  StepOutput<T> out;
  out.hidden = Tensor<T>({1, d});
  kernels::layer_norm_row(d, x.data(), S.value(kFinalGain).data(), S.value(kFinalBias).data(), eps, out.hidden.data());
  if (with_logits) {
    out.logits = Tensor<T>({1, c.vocab_size});
    if (c.tie_unembed) {
      kernels::vec_mat_t(d, c.vocab_size, out.hidden.data(), S.value(kTokEmb).data(), out.logits.data());
    } else {
      kernels::vec_mat(d, c.vocab_size, out.hidden.data(), S.value(kUnembed).data(), static_cast<const T*>(nullptr),
                       out.logits.data());
    }
  }
  return out;
}

#define FLYTHINKER_INSTANTIATE(T)                                                                              \
  template struct TransformerParams<T>;                                                                        \
  template class DecodeCache<T>;                                                                               \
  template Var embed_tokens<T>(Tape<T>&, const TransformerParams<T>&, std::span<const TokenId>);              \
  template Var hidden_states<T>(Tape<T>&, const TransformerParams<T>&, Var, std::size_t, DecodeCache<T>*);    \
  template Var unembed<T>(Tape<T>&, const TransformerParams<T>&, Var);                                        \
  template Tensor<T> token_embeddings<T>(const TransformerParams<T>&, std::span<const TokenId>);              \
  template Tensor<T> forward_hidden<T>(const TransformerParams<T>&, std::span<const TokenId>);                \
  template Tensor<T> forward_logits<T>(const TransformerParams<T>&, std::span<const TokenId>);                \
  template Tensor<T> forward_logits_from_embeddings<T>(const TransformerParams<T>&, const Tensor<T>&,          \
                                                       std::size_t);                                           \
  template PrefillOutput<T> prefill<T>(const TransformerParams<T>&, DecodeCache<T>&, const Tensor<T>&);       \
  template StepOutput<T> incremental_step<T>(const TransformerParams<T>&, DecodeCache<T>&, std::span<const T>, \
                                             bool);

FLYTHINKER_INSTANTIATE(float)
FLYTHINKER_INSTANTIATE(double)
#undef FLYTHINKER_INSTANTIATE

}  // namespace flythinker
