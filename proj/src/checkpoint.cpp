// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#include "flythinker/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <sstream>

#include "flythinker/io.hpp"
#include "json.hpp"

namespace flythinker {

using json = nlohmann::json;

namespace {

constexpr char kMagic[8] = {'F', 'T', 'C', 'K', 'P', 'T', '\0', '\0'};

template <typename U>
void put(std::string& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    std::reverse(b, b + sizeof(U));
    out.append(reinterpret_cast<const char*>(b), sizeof(U));
  } else {
    out.append(reinterpret_cast<const char*>(&v), sizeof(U));
  }
}

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, b_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) {
      auto* p = reinterpret_cast<unsigned char*>(&v);
      std::reverse(p, p + sizeof(U));
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > b_.size()) throw CorruptCheckpointError(std::string("checkpoint truncated while reading ") + what);
  }
  std::string_view b_;
  std::size_t pos_ = 0;
};

json model_json(const ModelConfig& m) {
  return {{"n_layers", m.n_layers}, {"n_heads", m.n_heads},       {"d_model", m.d_model},
          {"d_ff", m.d_ff},         {"vocab_size", m.vocab_size}, {"max_len", m.max_len},
          {"tie_unembed", m.tie_unembed}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.n_layers = j.at("n_layers").get<std::size_t>();
  m.n_heads = j.at("n_heads").get<std::size_t>();
  m.d_model = j.at("d_model").get<std::size_t>();
  m.d_ff = j.at("d_ff").get<std::size_t>();
  m.vocab_size = j.at("vocab_size").get<std::size_t>();
  m.max_len = j.at("max_len").get<std::size_t>();
  m.tie_unembed = j.at("tie_unembed").get<bool>();
  return m;
}

std::string prefixed(const std::string& group, const std::string& name) { return group + "/" + name; }

}  // namespace

std::uint64_t parse_hash(const std::string& hex) {
  if (hex.empty() || hex.size() > 16) throw ConfigError("bad config hash '" + hex + "'");
  std::uint64_t v = 0;
  for (char ch : hex) {
    v <<= 4;
    if (ch >= '0' && ch <= '9') {
      v |= static_cast<std::uint64_t>(ch - '0');
    } else if (ch >= 'a' && ch <= 'f') {
      v |= static_cast<std::uint64_t>(ch - 'a' + 10);
    } else {
      throw ConfigError("bad config hash '" + hex + "'");
    }
  }
  return v;
}

Checkpoint capture_checkpoint(const Trainer<float>& trainer, std::uint64_t config_hash) {
  const auto& m = trainer.model();
  Checkpoint c;
  c.config_hash = config_hash;
  c.generator = m.generator.config;
  c.reasoner = m.reasoner.config;
  c.fusion = m.fusion;
  c.policy = trainer.config().policy;
  c.step = trainer.steps_done();
  c.adam_t = trainer.optimizer().steps();
  c.rng_state = trainer.rng_state();
  for (const auto& [group, store] : parameter_groups(m)) {
    for (const auto& [name, e] : *store) c.tensors.emplace(prefixed(group, name), e.value);
  }
  for (const auto& [key, mom] : trainer.optimizer().moments()) {
    c.tensors.emplace("adam.m/" + key, mom.m);
    c.tensors.emplace("adam.v/" + key, mom.v);
  }
  return c;
}

void check_model_configs(const Checkpoint& ckpt, const ModelConfig& generator, const ModelConfig& reasoner) {
  if (!(ckpt.generator == generator)) throw ConfigMismatchError("checkpoint generator config differs from the run config");
  if (!(ckpt.reasoner == reasoner)) throw ConfigMismatchError("checkpoint reasoner config differs from the run config");
}

FlyThinkerModel<float> model_from_checkpoint(const Checkpoint& ckpt) {
  // shapes and names come from a fresh init; values from the file
  FlyThinkerModel<float> m = FlyThinkerModel<float>::init(ckpt.generator, ckpt.reasoner, ckpt.fusion, 0);
  for (const auto& [group, store] : parameter_groups(m)) {
    for (auto& [name, e] : *store) {
      auto it = ckpt.tensors.find(prefixed(group, name));
      if (it == ckpt.tensors.end()) throw CorruptCheckpointError("checkpoint is missing tensor " + prefixed(group, name));
      if (it->second.shape() != e.value.shape()) {
        throw CorruptCheckpointError("tensor " + it->first + " has shape " + shape_string(it->second.shape()) +
                                     ", expected " + shape_string(e.value.shape()));
      }
    }
  }
  for (auto& [group, store] : parameter_groups(m)) {
    for (auto& [name, e] : *store) e.value = ckpt.tensors.at(prefixed(group, name));
  }
  return m;
}

void restore_checkpoint(Trainer<float>& trainer, const Checkpoint& ckpt) {
  auto& model = trainer.model();
  check_model_configs(ckpt, model.generator.config, model.reasoner.config);
  FlyThinkerModel<float> restored = model_from_checkpoint(ckpt);
  restored.fusion = model.fusion;
  std::map<std::string, AdamOptimizer<float>::Moments> moments;
  for (const auto& [group, store] : parameter_groups(restored)) {
    for (const auto& [name, e] : *store) {
      const std::string key = prefixed(group, name);
      auto m = ckpt.tensors.find("adam.m/" + key);
      auto v = ckpt.tensors.find("adam.v/" + key);
      if ((m == ckpt.tensors.end()) != (v == ckpt.tensors.end())) {
        throw CorruptCheckpointError("checkpoint has only one Adam moment for " + key);
      }
      if (m == ckpt.tensors.end()) continue;
      if (m->second.shape() != e.value.shape() || v->second.shape() != e.value.shape()) {
        throw CorruptCheckpointError("Adam moment shape mismatch for " + key);
      }
      moments.emplace(key, AdamOptimizer<float>::Moments{m->second, v->second});
    }
  }
  // validate the RNG state on a scratch trainer-independent copy
  {
    std::istringstream is(ckpt.rng_state);
    std::mt19937_64 r;
    is >> r;
    if (is.fail()) throw CorruptCheckpointError("unreadable RNG state");
  }
  for (auto& [group, store] : parameter_groups(model)) {
    for (auto& [name, e] : *store) e.value = ckpt.tensors.at(prefixed(group, name));
  }
  trainer.optimizer().moments() = std::move(moments);
  trainer.optimizer().set_steps(ckpt.adam_t);
  trainer.set_steps_done(ckpt.step);
  trainer.set_rng_state(ckpt.rng_state);
}

std::string serialize_checkpoint(const Checkpoint& c) {
  json h;
  h["generator"] = model_json(c.generator);
  h["reasoner"] = model_json(c.reasoner);
  h["fusion"] = {{"lambda", c.fusion.lambda}, {"region", to_string(c.fusion.region)}};
  h["policy"] = to_string(c.policy);
  h["step"] = c.step;
  h["adam_t"] = c.adam_t;
  h["rng_state"] = c.rng_state;
  const std::string header = h.dump();

  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, c.version);
  put<std::uint64_t>(out, c.config_hash);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    const std::uint64_t nbytes = t.size() * sizeof(float);
    put<std::uint64_t>(out, offset);
    put<std::uint64_t>(out, nbytes);
    offset += nbytes;
  }
  for (const auto& [name, t] : c.tensors) {
    for (float v : t.values()) put<float>(out, v);
  }
  put<std::uint64_t>(out, fnv1a64(out));
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(sizeof kMagic, "magic") != std::string_view(kMagic, sizeof kMagic)) {
    throw CorruptCheckpointError("not a checkpoint file (bad magic)");
  }
  Checkpoint c;
  c.version = r.get<std::uint32_t>("version");
  if (c.version != kCheckpointVersion) {
    throw VersionMismatchError("checkpoint format version " + std::to_string(c.version) + ", expected " +
                               std::to_string(kCheckpointVersion));
  }
  if (bytes.size() < sizeof(std::uint64_t)) throw CorruptCheckpointError("checkpoint truncated");
  const std::string_view body = bytes.substr(0, bytes.size() - sizeof(std::uint64_t));
  {
    Reader tail(bytes.substr(body.size()));
    if (tail.get<std::uint64_t>("checksum") != fnv1a64(body)) {
      throw CorruptCheckpointError("checkpoint checksum mismatch (truncated or corrupt file)");
    }
  }
  Reader in(body);
  in.bytes(sizeof kMagic + sizeof(std::uint32_t), "magic");
  c.config_hash = in.get<std::uint64_t>("config hash");
  const auto hlen = in.get<std::uint32_t>("header length");
  const std::string_view header = in.bytes(hlen, "header");
  try {
    const json h = json::parse(header);
    c.generator = model_from_json(h.at("generator"));
    c.reasoner = model_from_json(h.at("reasoner"));
    c.fusion.lambda = h.at("fusion").at("lambda").get<double>();
    c.fusion.region = region_from_string(h.at("fusion").at("region").get<std::string>());
    c.policy = policy_from_string(h.at("policy").get<std::string>());
    c.step = h.at("step").get<std::uint64_t>();
    c.adam_t = h.at("adam_t").get<std::uint64_t>();
    c.rng_state = h.at("rng_state").get<std::string>();
  } catch (const json::exception& e) {
    throw CorruptCheckpointError(std::string("checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CorruptCheckpointError(std::string("checkpoint header: ") + e.what());
  }

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset, nbytes;
  };
  const auto count = in.get<std::uint32_t>("tensor count");
  std::vector<Entry> index;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const auto nlen = in.get<std::uint32_t>("tensor name length");
    e.name = std::string(in.bytes(nlen, "tensor name"));
    const auto rank = in.get<std::uint32_t>("tensor rank");
    if (rank == 0 || rank > 8) throw CorruptCheckpointError("tensor " + e.name + " has rank " + std::to_string(rank));
    std::uint64_t elems = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = in.get<std::uint64_t>("tensor dims");
      if (d == 0) throw CorruptCheckpointError("tensor " + e.name + " has a zero dimension");
      e.shape.push_back(static_cast<std::size_t>(d));
      elems *= d;
    }
    e.offset = in.get<std::uint64_t>("tensor offset");
    e.nbytes = in.get<std::uint64_t>("tensor size");
    if (e.nbytes != elems * sizeof(float)) throw CorruptCheckpointError("tensor " + e.name + " size disagrees with shape");
    index.push_back(std::move(e));
  }
  const std::size_t payload = in.pos();
  for (const auto& e : index) {
    if (payload + e.offset + e.nbytes > body.size()) {
      throw CorruptCheckpointError("tensor " + e.name + " extends past the end of the file");
    }
    Reader t(body.substr(payload + e.offset, e.nbytes));
    std::vector<float> data(e.nbytes / sizeof(float));
    for (auto& v : data) v = t.get<float>("tensor payload");
    if (!c.tensors.emplace(e.name, Tensor<float>(e.shape, std::move(data))).second) {
      throw CorruptCheckpointError("duplicate tensor " + e.name);
    }
  }
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { write_file(path, serialize_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) {
  try {
    return parse_checkpoint(read_file(path));
  } catch (const CorruptCheckpointError& e) {
    throw CorruptCheckpointError(path + ": " + e.what());
  }
}

}  // namespace flythinker
