// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#include "flythinker/corpus.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "flythinker/io.hpp"
#include "json.hpp"

namespace flythinker {

using json = nlohmann::json;

namespace {

// {P} product, {N} aspect noun, {S} the user's synonym for that aspect.
struct TemplateFamily {
  std::vector<std::string> open;
  std::vector<std::string> aspect;
  std::vector<std::string> close;
};

const std::vector<TemplateFamily>& families() {
  static const std::vector<TemplateFamily> f = {
      {{"i", "bought", "this", "{P}", "last", "week", "."}, {"the", "{N}", "is", "{S}", "."},
       {"i", "would", "recommend", "it", "."}},
      {{"here", "is", "my", "review", "of", "the", "{P}", "."}, {"i", "found", "the", "{N}", "{S}", "."},
       {"that", "is", "all", "for", "now", "."}},
      {{"my", "new", "{P}", "arrived", "today", "."}, {"its", "{N}", "feels", "very", "{S}", "."},
       {"thanks", "for", "reading", "."}},
  };
  return f;
}

const std::vector<std::string> kQueryWords = {"review", "{P}", "on", "{N}", ","};
const std::vector<std::string> kSpecials = {"<pad>", "<bos>", "<eos>", "<sep>", "<hist>", "<query>", "<resp>"};

std::mt19937_64 rng_for(std::uint64_t seed, const std::string& tag) { return std::mt19937_64(group_seed(seed, tag)); }

std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace

const std::vector<ConceptSlot>& concept_slots() {
  static const std::vector<ConceptSlot> s = {
      {"quality", {"excellent", "superb", "outstanding", "splendid"}},
      {"price", {"affordable", "cheap", "reasonable", "economical"}},
      {"shipping", {"fast", "quick", "speedy", "prompt"}},
      {"design", {"elegant", "stylish", "sleek", "gorgeous"}},
      {"comfort", {"comfortable", "cozy", "pleasant", "snug"}},
      {"durability", {"sturdy", "robust", "solid", "tough"}},
      {"support", {"helpful", "friendly", "responsive", "attentive"}},
      {"battery", {"lasting", "reliable", "dependable", "steady"}},
  };
  return s;
}

const std::vector<std::string>& product_words() {
  static const std::vector<std::string> p = {
      "phone",   "laptop", "kettle",  "blender", "toaster", "camera",  "speaker", "headset", "keyboard", "mouse",
      "monitor", "tablet", "watch",   "backpack", "jacket", "sneakers", "chair",  "desk",    "lamp",     "mattress",
      "pillow",  "blanket", "vacuum", "heater",  "fan",     "router",  "printer", "charger", "drone",    "bicycle",
      "helmet",  "tent",   "stove",   "grill",   "mixer",   "juicer",  "scale",   "thermos", "umbrella", "wallet"};
  return p;
}

// --- vocabulary -------------------------------------------------------------

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
  Vocabulary v;
  for (auto& w : words) {
    if (v.index_.count(w)) throw VocabularyError("duplicate vocabulary word '" + w + "'");
    v.index_.emplace(w, static_cast<TokenId>(v.words_.size()));
    v.words_.push_back(std::move(w));
  }
  if (v.words_.size() < kSpecials.size()) throw VocabularyError("vocabulary is missing control tokens");
  for (std::size_t i = 0; i < kSpecials.size(); ++i) {
    if (v.words_[i] != kSpecials[i]) throw VocabularyError("control token " + kSpecials[i] + " is not at id " + std::to_string(i));
  }
  return v;
}

Vocabulary Vocabulary::standard() {
  std::vector<std::string> words = kSpecials;
  std::set<std::string> seen(words.begin(), words.end());
  auto add = [&](const std::string& w) {
    if (w.front() == '{') return;
    if (seen.insert(w).second) words.push_back(w);
  };
  for (const auto& f : families()) {
    for (const auto* part : {&f.open, &f.aspect, &f.close}) {
      for (const auto& w : *part) add(w);
    }
  }
  for (const auto& w : kQueryWords) add(w);
  for (const auto& p : product_words()) add(p);
  for (const auto& s : concept_slots()) {
    add(s.noun);
    for (const char* syn : s.synonyms) add(syn);
  }
  return from_words(std::move(words));
}

TokenId Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw VocabularyError("word '" + word + "' is not in the vocabulary");
  return it->second;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(words_.size()));
  }
  return words_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::encode(const std::vector<std::string>& words) const {
  std::vector<TokenId> out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId t : ids) {
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

// --- generation -------------------------------------------------------------

void CorpusConfig::validate() const {
  if (n_users < 2) throw ConfigError("corpus.n_users must be >= 2");
  if (samples_per_user < 1) throw ConfigError("corpus.samples_per_user must be >= 1");
  if (style_space < 1) throw ConfigError("corpus.style_space must be >= 1");
  if (history_len < 1) throw ConfigError("corpus.history_len must be >= 1");
  if (!(heldout_fraction > 0 && heldout_fraction < 1)) throw ConfigError("corpus.heldout_fraction must be in (0, 1)");
  const auto held = static_cast<std::size_t>(std::ceil(heldout_fraction * static_cast<double>(n_users)));
  if (held >= n_users) throw ConfigError("corpus.heldout_fraction leaves no training users");
}

bool Corpus::is_heldout(std::uint32_t user_id) const {
  return std::binary_search(heldout_users.begin(), heldout_users.end(), user_id);
}

UserStyle user_style(std::uint64_t seed, std::uint32_t user_id, std::size_t style_space) {
  UserStyle s;
  s.user_id = user_id;
  s.style_index = static_cast<std::uint32_t>(user_id % style_space);
  auto rng = rng_for(seed, "style/" + std::to_string(s.style_index));
  s.synonym.resize(kConceptSlots);
  for (auto& v : s.synonym) v = static_cast<std::uint8_t>(uniform(rng, 0, kSynonymsPerSlot - 1));
  s.family = static_cast<std::uint8_t>(uniform(rng, 0, kTemplateFamilies - 1));
  s.mean_aspects = static_cast<std::uint8_t>(uniform(rng, 2, 5));
  return s;
}

namespace {

std::vector<std::size_t> pick_aspects(std::mt19937_64& rng, const UserStyle& style) {
  const auto jitter = static_cast<int>(uniform(rng, 0, 2)) - 1;
  const auto k = static_cast<std::size_t>(std::clamp(static_cast<int>(style.mean_aspects) + jitter, 1,
                                                     static_cast<int>(kConceptSlots)));
  std::vector<std::size_t> all(kConceptSlots);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(k);
  return all;
}

std::vector<std::string> render(const std::vector<std::string>& tpl, const std::string& product, std::size_t slot,
                                const UserStyle& style) {
  std::vector<std::string> out;
  for (const auto& w : tpl) {
    if (w == "{P}") {
      out.push_back(product);
    } else if (w == "{N}") {
      out.push_back(concept_slots()[slot].noun);
    } else if (w == "{S}") {
      out.push_back(concept_slots()[slot].synonyms[style.synonym[slot]]);
    } else {
      out.push_back(w);
    }
  }
  return out;
}

std::vector<std::string> query_words(const std::string& product, const std::vector<std::size_t>& aspects) {
  std::vector<std::string> q = {"review", product, "on"};
  for (std::size_t i = 0; i < aspects.size(); ++i) {
    if (i) q.push_back(",");
    q.push_back(concept_slots()[aspects[i]].noun);
  }
  return q;
}

std::vector<std::string> response_words(const std::string& product, const std::vector<std::size_t>& aspects,
                                        const UserStyle& style) {
  const auto& fam = families()[style.family];
  std::vector<std::string> r = render(fam.open, product, 0, style);
  for (std::size_t a : aspects) {
    auto part = render(fam.aspect, product, a, style);
    r.insert(r.end(), part.begin(), part.end());
  }
  auto close = render(fam.close, product, 0, style);
  r.insert(r.end(), close.begin(), close.end());
  return r;
}

}  // namespace

Corpus generate_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  Corpus c;
  c.config = cfg;
  c.vocab = Vocabulary::standard();
  if (cfg.style_space < cfg.n_users) {
    c.warnings.push_back("style_space " + std::to_string(cfg.style_space) + " < n_users " +
                         std::to_string(cfg.n_users) + "; styles are reused across users");
  }
  const auto& products = product_words();
  for (std::uint32_t u = 0; u < cfg.n_users; ++u) {
    c.styles.push_back(user_style(cfg.seed, u, cfg.style_space));
    const UserStyle& style = c.styles.back();
    for (std::uint32_t k = 0; k < cfg.samples_per_user; ++k) {
      const auto sid = static_cast<std::uint32_t>(u * cfg.samples_per_user + k);
      auto rng = rng_for(cfg.seed, "sample/" + std::to_string(u) + "/" + std::to_string(k));
      Sample s;
      s.user_id = u;
      s.sample_id = sid;
      const std::string product = products[uniform(rng, 0, products.size() - 1)];
      const auto aspects = pick_aspects(rng, style);

      std::vector<std::string> hist_products;
      std::vector<std::vector<std::size_t>> hist_aspects;
      for (std::size_t h = 0; h < cfg.history_len; ++h) {
        hist_products.push_back(products[uniform(rng, 0, products.size() - 1)]);
        hist_aspects.push_back(pick_aspects(rng, style));
      }
      // every aspect of y shows up somewhere in the history
      for (std::size_t a : aspects) {
        bool covered = false;
        for (const auto& ha : hist_aspects) covered |= std::find(ha.begin(), ha.end(), a) != ha.end();
        if (covered) continue;
        auto smallest = std::min_element(hist_aspects.begin(), hist_aspects.end(),
                                         [](const auto& x, const auto& y) { return x.size() < y.size(); });
        smallest->push_back(a);
      }
      for (std::size_t h = 0; h < cfg.history_len; ++h) {
        s.history.push_back({c.vocab.encode(query_words(hist_products[h], hist_aspects[h])),
                             c.vocab.encode(response_words(hist_products[h], hist_aspects[h], style))});
      }
      s.query = c.vocab.encode(query_words(product, aspects));
      s.response = c.vocab.encode(response_words(product, aspects, style));
      c.samples.push_back(std::move(s));
    }
  }
  const auto held = static_cast<std::size_t>(std::ceil(cfg.heldout_fraction * static_cast<double>(cfg.n_users)));
  for (std::size_t u = cfg.n_users - held; u < cfg.n_users; ++u) c.heldout_users.push_back(static_cast<std::uint32_t>(u));
  return c;
}

EncodedSample encode_sample(const Sample& s) {
  EncodedSample e;
  e.user_id = s.user_id;
  e.sample_id = s.sample_id;
  e.tokens.push_back(Vocabulary::kBos);
  for (const auto& h : s.history) {
    e.tokens.push_back(Vocabulary::kHist);
    e.tokens.insert(e.tokens.end(), h.query.begin(), h.query.end());
    e.tokens.push_back(Vocabulary::kSep);
    e.tokens.insert(e.tokens.end(), h.response.begin(), h.response.end());
  }
  e.tokens.push_back(Vocabulary::kQuery);
  e.tokens.insert(e.tokens.end(), s.query.begin(), s.query.end());
  e.tokens.push_back(Vocabulary::kResp);
  e.prompt_len = e.tokens.size();
  e.tokens.insert(e.tokens.end(), s.response.begin(), s.response.end());
  e.tokens.push_back(Vocabulary::kEos);
  return e;
}

std::vector<EncodedSample> encode_samples(const Corpus& c, bool heldout) {
  std::vector<EncodedSample> out;
  for (const auto& s : c.samples) {
    if (c.is_heldout(s.user_id) == heldout) out.push_back(encode_sample(s));
  }
  return out;
}

// --- files ------------------------------------------------------------------

std::string dataset_jsonl(const std::vector<Sample>& samples) {
  std::string out;
  for (const auto& s : samples) {
    json j;
    j["user_id"] = s.user_id;
    j["sample_id"] = s.sample_id;
    j["history"] = json::array();
    for (const auto& h : s.history) j["history"].push_back({{"query", h.query}, {"response", h.response}});
    j["query"] = s.query;
    j["response"] = s.response;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<Sample> parse_dataset_jsonl(const std::string& text) {
  std::vector<Sample> out;
  std::size_t line_no = 0;
  for (const auto& line : split(text, '\n')) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      Sample s;
      s.user_id = j.at("user_id").get<std::uint32_t>();
      s.sample_id = j.at("sample_id").get<std::uint32_t>();
      for (const auto& h : j.at("history")) {
        s.history.push_back({h.at("query").get<std::vector<TokenId>>(), h.at("response").get<std::vector<TokenId>>()});
      }
      s.query = j.at("query").get<std::vector<TokenId>>();
      s.response = j.at("response").get<std::vector<TokenId>>();
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw IoError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

namespace {

json corpus_config_json(const CorpusConfig& c) {
  return {{"n_users", c.n_users},         {"samples_per_user", c.samples_per_user},
          {"style_space", c.style_space}, {"history_len", c.history_len},
          {"heldout_fraction", c.heldout_fraction}, {"seed", c.seed}};
}

}  // namespace

std::string manifest_json(const Corpus& c, const std::string& corpus_hash, const std::string& config_hash) {
  json j;
  j["corpus_hash"] = corpus_hash;
  j["config_hash"] = config_hash;
  j["corpus"] = corpus_config_json(c.config);
  j["vocabulary"] = c.vocab.words();
  j["heldout_users"] = c.heldout_users;
  j["samples"] = c.samples.size();
  j["warnings"] = c.warnings;
  return j.dump(2) + "\n";
}

DatasetManifest parse_manifest(const std::string& text) {
  try {
    const json j = json::parse(text);
    DatasetManifest m;
    m.corpus_hash = j.at("corpus_hash").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    const auto& c = j.at("corpus");
    m.corpus.n_users = c.at("n_users").get<std::size_t>();
    m.corpus.samples_per_user = c.at("samples_per_user").get<std::size_t>();
    m.corpus.style_space = c.at("style_space").get<std::size_t>();
    m.corpus.history_len = c.at("history_len").get<std::size_t>();
    m.corpus.heldout_fraction = c.at("heldout_fraction").get<double>();
    m.corpus.seed = c.at("seed").get<std::uint64_t>();
    m.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    m.heldout_users = j.at("heldout_users").get<std::vector<std::uint32_t>>();
    m.samples = j.at("samples").get<std::size_t>();
    return m;
  } catch (const json::exception& e) {
    throw IoError(std::string("manifest: ") + e.what());
  }
}

std::string write_dataset(const Corpus& c, const std::string& dir, const std::string& config_hash) {
  const std::string data = dataset_jsonl(c.samples);
  const std::string hash = hex64(fnv1a64(data));
  write_file((std::filesystem::path(dir) / "dataset.jsonl").string(), data);
  write_file((std::filesystem::path(dir) / "manifest.json").string(), manifest_json(c, hash, config_hash));
  return hash;
}

Corpus read_dataset(const std::string& dir) {
  const std::string data = read_file((std::filesystem::path(dir) / "dataset.jsonl").string());
  const DatasetManifest m = parse_manifest(read_file((std::filesystem::path(dir) / "manifest.json").string()));
  if (hex64(fnv1a64(data)) != m.corpus_hash) {
    throw IoError("dataset in '" + dir + "' does not match the corpus hash in its manifest");
  }
  Corpus c;
  c.config = m.corpus;
  c.vocab = Vocabulary::from_words(m.vocabulary);
  for (std::uint32_t u = 0; u < c.config.n_users; ++u) c.styles.push_back(user_style(c.config.seed, u, c.config.style_space));
  c.samples = parse_dataset_jsonl(data);
  c.heldout_users = m.heldout_users;
  std::sort(c.heldout_users.begin(), c.heldout_users.end());
  return c;
}

OracleReport style_oracle(const Corpus& c) {
  // synonym word -> (slot, choice)
  std::map<TokenId, std::pair<std::size_t, std::size_t>> syn;
  for (std::size_t s = 0; s < kConceptSlots; ++s) {
    for (std::size_t k = 0; k < kSynonymsPerSlot; ++k) syn[c.vocab.id(concept_slots()[s].synonyms[k])] = {s, k};
  }
  OracleReport rep;
  for (const auto& sample : c.samples) {
    std::vector<std::array<std::size_t, kSynonymsPerSlot>> counts(kConceptSlots);
    for (auto& a : counts) a.fill(0);
    for (const auto& h : sample.history) {
      for (TokenId t : h.response) {
        if (auto it = syn.find(t); it != syn.end()) ++counts[it->second.first][it->second.second];
      }
    }
    for (TokenId t : sample.response) {
      auto it = syn.find(t);
      if (it == syn.end()) continue;
      const auto& ct = counts[it->second.first];
      const auto guess = static_cast<std::size_t>(std::max_element(ct.begin(), ct.end()) - ct.begin());
      ++rep.predictions;
      if (ct[guess] > 0 && guess == it->second.second) ++rep.correct;
    }
  }
  return rep;
}

void dump_latents(const FlyThinkerModel<float>& model, const std::vector<EncodedSample>& samples,
                  const std::string& out_path, const std::string& config_hash) {
  const std::size_t d = model.generator.config.d_model;
  std::string out = "user_id,sample_id,position";
  for (std::size_t j = 0; j < d; ++j) out += ",z" + std::to_string(j);
  out += '\n';
  char buf[32];
  for (const auto& s : samples) {
    const LatentThoughts<float> lat = reason_all(model, s.tokens);
    for (std::size_t i = 0; i < lat.vectors.rows(); ++i) {
      out += std::to_string(s.user_id) + "," + std::to_string(s.sample_id) + "," +
             std::to_string(lat.source_positions[i]);
      for (float v : lat.vectors.row(i)) {
        auto res = std::to_chars(buf, buf + sizeof buf, v);
        out += ',';
        out.append(buf, res.ptr);
      }
      out += '\n';
    }
  }
  out += "# config_hash=" + config_hash + "\n";
  write_file(out_path, out);
}

}  // namespace flythinker
