// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

// Synthetic personalized review corpus. Every user has a hidden style (one
// preferred synonym per concept slot, a template family, a typical number of
// aspects). A sample's response is fully determined by its query and the
// style visible in the user's history.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flythinker/fusion.hpp"
#include "flythinker/trainer.hpp"

namespace flythinker {

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0, kBos = 1, kEos = 2, kSep = 3, kHist = 4, kQuery = 5, kResp = 6;

  // The fixed corpus vocabulary: control tokens followed by every template,
  // product, aspect and synonym word.
  static Vocabulary standard();
  static Vocabulary from_words(std::vector<std::string> words);

  std::size_t size() const noexcept { return words_.size(); }
  TokenId id(const std::string& word) const;
  const std::string& word(TokenId id) const;
  const std::vector<std::string>& words() const noexcept { return words_; }

  std::vector<TokenId> encode(const std::vector<std::string>& words) const;
  std::string decode(std::span<const TokenId> ids) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, TokenId> index_;
};

inline constexpr std::size_t kConceptSlots = 8;
inline constexpr std::size_t kSynonymsPerSlot = 4;
inline constexpr std::size_t kTemplateFamilies = 3;

// Aspect noun and its synonym set for one concept slot.
struct ConceptSlot {
  const char* noun;
  const char* synonyms[kSynonymsPerSlot];
};
const std::vector<ConceptSlot>& concept_slots();
const std::vector<std::string>& product_words();

struct UserStyle {
  std::uint32_t user_id = 0;
  std::uint32_t style_index = 0;
  std::vector<std::uint8_t> synonym;  // preferred synonym per slot
  std::uint8_t family = 0;            // template family
  std::uint8_t mean_aspects = 3;      // aspects per response, +-1
};

struct QueryResponse {
  std::vector<TokenId> query;
  std::vector<TokenId> response;
};

struct Sample {
  std::uint32_t user_id = 0;
  std::uint32_t sample_id = 0;
  std::vector<QueryResponse> history;
  std::vector<TokenId> query;
  std::vector<TokenId> response;  // without the end token
};

struct CorpusConfig {
  std::size_t n_users = 200;
  std::size_t samples_per_user = 8;
  std::size_t style_space = 100000;  // number of distinct styles; fewer than n_users forces reuse
  std::size_t history_len = 2;
  double heldout_fraction = 0.1;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Corpus {
  CorpusConfig config;
  Vocabulary vocab;
  std::vector<UserStyle> styles;  // indexed by user id
  std::vector<Sample> samples;
  std::vector<std::uint32_t> heldout_users;
  std::vector<std::string> warnings;

  bool is_heldout(std::uint32_t user_id) const;
};

// Style of a user; a deterministic function of (seed, user_id, style_space).
UserStyle user_style(std::uint64_t seed, std::uint32_t user_id, std::size_t style_space);

Corpus generate_corpus(const CorpusConfig& cfg);

// <bos> (<hist> q <sep> r)* <query> x <resp> | y <eos>
EncodedSample encode_sample(const Sample& s);
std::vector<EncodedSample> encode_samples(const Corpus& c, bool heldout);

// One JSON object per line: user_id, sample_id, history, query, response.
std::string dataset_jsonl(const std::vector<Sample>& samples);
std::vector<Sample> parse_dataset_jsonl(const std::string& text);

struct DatasetManifest {
  std::string corpus_hash;
  std::string config_hash;
  CorpusConfig corpus;
  std::vector<std::string> vocabulary;
  std::vector<std::uint32_t> heldout_users;
  std::size_t samples = 0;
};
std::string manifest_json(const Corpus& c, const std::string& corpus_hash, const std::string& config_hash);
DatasetManifest parse_manifest(const std::string& text);

// Writes dataset.jsonl and manifest.json into `dir`; returns the corpus hash.
std::string write_dataset(const Corpus& c, const std::string& dir, const std::string& config_hash);
// Reloads a dataset directory written by write_dataset.
Corpus read_dataset(const std::string& dir);

// Per-user frequency oracle: predicts each slot's synonym in y as the most
// frequent synonym of that slot in the history responses.
struct OracleReport {
  std::size_t predictions = 0;
  std::size_t correct = 0;
  double accuracy() const { return predictions ? static_cast<double>(correct) / static_cast<double>(predictions) : 0; }
};
OracleReport style_oracle(const Corpus& c);

// One CSV row per (sample, position 0..N-2) of pre-fusion latents.
void dump_latents(const FlyThinkerModel<float>& model, const std::vector<EncodedSample>& samples,
                  const std::string& out_path, const std::string& config_hash);

}  // namespace flythinker
