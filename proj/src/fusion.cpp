// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#include "flythinker/fusion.hpp"

#include <random>

#include "kernels.hpp"

namespace flythinker {

std::string to_string(Region r) {
  switch (r) {
    case Region::global: return "global";
    case Region::input_only: return "input_only";
    case Region::output_only: return "output_only";
  }
  return "global";
}

Region region_from_string(const std::string& s) {
  if (s == "global") return Region::global;
  if (s == "input_only") return Region::input_only;
  if (s == "output_only") return Region::output_only;
  throw ConfigError("unknown enhancement region '" + s + "' (expected global, input_only or output_only)");
}

void PromptLayout::validate() const {
  if (prompt_len < 1) throw DimensionError("prompt layout needs at least one prompt token");
  if (response_len < 1) throw DimensionError("prompt layout needs at least one response token");
}

bool is_enhanced(std::size_t position, std::size_t prompt_len, Region region) {
  if (position == 0) return false;
  switch (region) {
    case Region::global: return true;
    case Region::input_only: return position < prompt_len;
    case Region::output_only: return position >= prompt_len;
  }
  return false;
}

std::vector<std::int64_t> enhancement_sources(std::size_t n, std::size_t prompt_len, Region region,
                                              std::size_t valid_len) {
  std::vector<std::int64_t> src(n, -1);
  for (std::size_t i = 1; i < n && i < valid_len; ++i) {
    if (is_enhanced(i, prompt_len, region)) src[i] = static_cast<std::int64_t>(i - 1);
  }
  return src;
}

std::uint64_t group_seed(std::uint64_t seed, const std::string& group) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : group) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  // splitmix64 finaliser over the combined value
  std::uint64_t z = seed ^ h;
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename T>
FlyThinkerModel<T> FlyThinkerModel<T>::init(const ModelConfig& g, const ModelConfig& r, const FusionConfig& fusion,
                                            std::uint64_t seed) {
  FlyThinkerModel m{TransformerParams<T>::init(g, group_seed(seed, "generator")),
                    TransformerParams<T>::init(r, group_seed(seed, "reasoner")), std::nullopt, fusion};
  if (g.d_model != r.d_model) {
    std::mt19937_64 rng(group_seed(seed, "projection"));
    std::normal_distribution<double> normal(0.0, 0.02);
    Tensor<T> w({r.d_model, g.d_model});
    for (auto& v : w.values()) v = static_cast<T>(normal(rng));
    ParamStore<T> p;
    p.add(kProjectionWeight, std::move(w));
    m.projection = std::move(p);
  }
  m.validate();
  return m;
}

template <typename T>
void FlyThinkerModel<T>::validate() const {
  generator.config.validate();
  reasoner.config.validate();
  if (generator.config.vocab_size != reasoner.config.vocab_size) {
    throw ConfigError("reasoner and generator must share one vocabulary");
  }
  if (fusion.lambda < 0) throw ConfigError("lambda must be >= 0");
  const std::size_t dr = reasoner.config.d_model, dg = generator.config.d_model;
  if ((dr != dg) != projection.has_value()) {
    throw ConfigError("a projection is required exactly when reasoner and generator widths differ");
  }
  if (projection) {
    const auto& w = projection->value(kProjectionWeight);
    if (w.shape() != Shape{dr, dg}) {
      throw FusionWidthError("projection shape " + shape_string(w.shape()) + " does not bridge " + std::to_string(dr) +
                             " -> " + std::to_string(dg));
    }
  }
}

template <typename T>
Tensor<T> project_latent(const Tensor<T>& r, const Tensor<T>& w) {
  if (r.rank() != 2 || w.rank() != 2 || r.cols() != w.rows()) {
    throw DimensionError("project_latent: " + shape_string(r.shape()) + " * " + shape_string(w.shape()));
  }
  Tensor<T> out({r.rows(), w.cols()});
  kernels::gemm_nn(r.rows(), r.cols(), w.cols(), r.data(), w.data(), out.data(), false);
  return out;
}

template <typename T>
Var latent_graph(Tape<T>& tape, const FlyThinkerModel<T>& model, std::span<const TokenId> tokens, std::size_t seq_len) {
  Var h = hidden_states(tape, model.reasoner, embed_tokens(tape, model.reasoner, tokens), seq_len);
  if (!model.projection) return h;
  return ad::matmul(tape, h, tape.parameter(*model.projection, kProjectionWeight));
}

template <typename T>
Var fuse_graph(Tape<T>& tape, Var token_emb, Var latents, std::span<const std::int64_t> sources, double lambda) {
  if (tape.value(token_emb).cols() != tape.value(latents).cols()) {
    throw FusionWidthError("latent width " + std::to_string(tape.value(latents).cols()) +
                           " does not match generator width " + std::to_string(tape.value(token_emb).cols()));
  }
  return ad::add_gathered_rows(tape, token_emb, latents, sources, lambda);
}

template <typename T>
LatentThoughts<T> reason_all(const TransformerParams<T>& reasoner, const ParamStore<T>* projection,
                             std::span<const TokenId> tokens) {
  if (tokens.size() < 2) throw DimensionError("reason_all needs at least two tokens");
  if (tokens.size() > reasoner.config.max_len) {
    throw LengthError("sequence length " + std::to_string(tokens.size()) + " exceeds reasoner max_len " +
                      std::to_string(reasoner.config.max_len));
  }
  Tape<T> tape(false);
  Var h = hidden_states(tape, reasoner, embed_tokens(tape, reasoner, tokens), tokens.size());
  const auto& hv = tape.value(h);
  LatentThoughts<T> out;
  Tensor<T> taps = hv.slice_rows(0, tokens.size() - 1);
  out.vectors = projection ? project_latent(taps, projection->value(kProjectionWeight)) : std::move(taps);
  out.source_positions.resize(tokens.size() - 1);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) out.source_positions[i] = i;
  return out;
}

template <typename T>
Tensor<T> reason_step(const TransformerParams<T>& reasoner, const ParamStore<T>* projection, DecodeCache<T>& cache,
                      TokenId token) {
  const TokenId one[] = {token};
  Tensor<T> emb = token_embeddings(reasoner, one);
  StepOutput<T> s = incremental_step(reasoner, cache, std::span<const T>(emb.values()), false);
  if (!projection) return std::move(s.hidden);
  return project_latent(s.hidden, projection->value(kProjectionWeight));
}

template <typename T>
Tensor<T> fuse(const Tensor<T>& token_emb, const LatentThoughts<T>& latents, const FusionConfig& cfg,
               const PromptLayout& layout) {
  const std::size_t n = token_emb.rows();
  if (n != layout.total()) {
    throw DimensionError("fuse: " + std::to_string(n) + " embedding rows for a layout of " +
                         std::to_string(layout.total()));
  }
  if (n > 1 && latents.vectors.rows() + 1 < n) throw DimensionError("fuse: latents do not cover positions 0..N-2");
  if (n > 1 && latents.vectors.cols() != token_emb.cols()) {
    throw FusionWidthError("latent width " + std::to_string(latents.vectors.cols()) + " does not match generator width " +
                           std::to_string(token_emb.cols()));
  }
  Tensor<T> out = token_emb;
  const std::size_t d = token_emb.cols();
  const T f = static_cast<T>(cfg.lambda);
  const auto src = enhancement_sources(n, layout.prompt_len, cfg.region, n);
  for (std::size_t i = 0; i < n; ++i) {
    if (src[i] < 0) continue;
    T* o = out.data() + i * d;
    const T* x = latents.vectors.data() + static_cast<std::size_t>(src[i]) * d;
    for (std::size_t j = 0; j < d; ++j) o[j] += f * x[j];
  }
  return out;
}

template <typename T>
Tensor<T> pipeline_logits(const FlyThinkerModel<T>& model, std::span<const TokenId> tokens, std::size_t prompt_len) {
  const std::size_t n = tokens.size();
  Tape<T> tape(false);
  Var lat = latent_graph(tape, model, tokens, n);
  Var emb = embed_tokens(tape, model.generator, tokens);
  const auto src = enhancement_sources(n, prompt_len, model.fusion.region, n);
  Var fused = fuse_graph(tape, emb, lat, src, model.fusion.lambda);
  Var h = hidden_states(tape, model.generator, fused, n);
  return tape.value(unembed(tape, model.generator, h));
}

#define FLYTHINKER_INSTANTIATE(T)                                                                                  \
  template struct FlyThinkerModel<T>;                                                                              \
  template Tensor<T> project_latent<T>(const Tensor<T>&, const Tensor<T>&);                                        \
  template Var latent_graph<T>(Tape<T>&, const FlyThinkerModel<T>&, std::span<const TokenId>, std::size_t);       \
  template Var fuse_graph<T>(Tape<T>&, Var, Var, std::span<const std::int64_t>, double);                           \
  template LatentThoughts<T> reason_all<T>(const TransformerParams<T>&, const ParamStore<T>*,                      \
                                           std::span<const TokenId>);                                              \
  template Tensor<T> reason_step<T>(const TransformerParams<T>&, const ParamStore<T>*, DecodeCache<T>&, TokenId);  \
  template Tensor<T> fuse<T>(const Tensor<T>&, const LatentThoughts<T>&, const FusionConfig&, const PromptLayout&); \
  template Tensor<T> pipeline_logits<T>(const FlyThinkerModel<T>&, std::span<const TokenId>, std::size_t);

FLYTHINKER_INSTANTIATE(float)
FLYTHINKER_INSTANTIATE(double)
#undef FLYTHINKER_INSTANTIATE

}  // namespace flythinker
