// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#include "flythinker/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

#include "flythinker/io.hpp"

namespace flythinker {

std::string to_string(Policy p) { return p == Policy::sft ? "sft" : "flythinker"; }

Policy policy_from_string(const std::string& s) {
  if (s == "flythinker") return Policy::flythinker;
  if (s == "sft") return Policy::sft;
  throw ConfigError("unknown training policy '" + s + "' (expected flythinker or sft)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("adam betas must be in [0, 1)");
  if (!(eps > 0)) throw ConfigError("adam eps must be > 0");
  if (!(grad_clip_norm > 0)) throw ConfigError("grad_clip_norm must be > 0");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
}

Batch make_batch(std::span<const EncodedSample* const> samples, TokenId pad) {
  if (samples.empty()) throw BatchError("empty batch");
  Batch b;
  b.batch_size = samples.size();
  for (const EncodedSample* s : samples) {
    if (s->prompt_len < 1) throw BatchError("sample " + std::to_string(s->sample_id) + " has no prompt");
    if (s->tokens.size() <= s->prompt_len) {
      throw BatchError("sample " + std::to_string(s->sample_id) + " has an empty response");
    }
    b.seq_len = std::max(b.seq_len, s->tokens.size());
  }
  const std::size_t N = b.seq_len;
  b.tokens.assign(b.batch_size * N, pad);
  b.targets.assign(b.batch_size * N, pad);
  b.loss_mask.assign(b.batch_size * N, 0);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const auto& tok = samples[s]->tokens;
    const std::size_t len = tok.size(), P = samples[s]->prompt_len;
    b.lengths.push_back(len);
    b.prompt_lens.push_back(P);
    b.real_tokens += len;
    std::copy(tok.begin(), tok.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(s * N));
    // Row i predicts token i + 1; only response tokens are scored.
    for (std::size_t i = P - 1; i + 1 < len; ++i) {
      b.targets[s * N + i] = tok[i + 1];
      b.loss_mask[s * N + i] = 1;
    }
  }
  return b;
}

std::vector<std::int64_t> batch_enhancement_sources(const Batch& batch, Region region) {
  const std::size_t N = batch.seq_len;
  std::vector<std::int64_t> src(batch.batch_size * N, -1);
  for (std::size_t s = 0; s < batch.batch_size; ++s) {
    const auto one = enhancement_sources(N, batch.prompt_lens[s], region, batch.lengths[s]);
    for (std::size_t i = 0; i < N; ++i) {
      if (one[i] >= 0) src[s * N + i] = one[i] + static_cast<std::int64_t>(s * N);
    }
  }
  return src;
}

template <typename T>
Var joint_loss(Tape<T>& tape, const FlyThinkerModel<T>& model, const Batch& batch, Policy policy,
               const std::vector<std::uint8_t>* latent_keep) {
  const std::size_t N = batch.seq_len;
  Var emb = embed_tokens(tape, model.generator, batch.tokens);
  Var input = emb;
  if (policy == Policy::flythinker) {
    Var lat = latent_graph(tape, model, batch.tokens, N);
    auto src = batch_enhancement_sources(batch, model.fusion.region);
    if (latent_keep) {
      if (latent_keep->size() != src.size()) throw DimensionError("latent_keep must have one flag per packed row");
      for (auto& s : src) {
        if (s >= 0 && !(*latent_keep)[static_cast<std::size_t>(s)]) s = -1;
      }
    }
    input = fuse_graph(tape, emb, lat, src, model.fusion.lambda);
  }
  Var h = hidden_states(tape, model.generator, input, N);
  // Only response rows reach the loss, so only they are unembedded.
  std::vector<std::int64_t> rows;
  std::vector<TokenId> targets;
  for (std::size_t i = 0; i < batch.loss_mask.size(); ++i) {
    if (!batch.loss_mask[i]) continue;
    rows.push_back(static_cast<std::int64_t>(i));
    targets.push_back(batch.targets[i]);
  }
  if (rows.empty()) throw EmptyLossError("batch has no response positions");
  Var logits = unembed(tape, model.generator, ad::gather_rows(tape, h, rows));
  const std::vector<std::uint8_t> all(rows.size(), 1);
  return ad::cross_entropy(tape, logits, std::span<const TokenId>(targets), std::span<const std::uint8_t>(all));
}

template <typename T>
double compute_loss(const Tensor<T>& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask) {
  Tape<T> tape(false);
  Var l = ad::cross_entropy(tape, tape.constant(logits), targets, mask);
  return static_cast<double>(tape.value(l)[0]);
}

template <typename T>
std::vector<std::pair<std::string, ParamStore<T>*>> parameter_groups(FlyThinkerModel<T>& model) {
  std::vector<std::pair<std::string, ParamStore<T>*>> g{{"generator", &model.generator.store}};
  if (model.projection) g.emplace_back("projection", &*model.projection);
  g.emplace_back("reasoner", &model.reasoner.store);
  return g;
}

template <typename T>
std::vector<std::pair<std::string, const ParamStore<T>*>> parameter_groups(const FlyThinkerModel<T>& model) {
  std::vector<std::pair<std::string, const ParamStore<T>*>> g{{"generator", &model.generator.store}};
  if (model.projection) g.emplace_back("projection", &*model.projection);
  g.emplace_back("reasoner", &model.reasoner.store);
  return g;
}

template <typename T>
double AdamOptimizer<T>::step(FlyThinkerModel<T>& model) {
  auto groups = parameter_groups(model);
  double sq = 0;
  for (auto& [gname, store] : groups) {
    for (auto& [name, e] : *store) {
      for (T g : e.grad.values()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  const double norm = std::sqrt(sq);
  const T clip = norm > cfg_.grad_clip_norm ? static_cast<T>(cfg_.grad_clip_norm / (norm + 1e-6)) : T(1);

  ++t_;
  const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
  const T lr = static_cast<T>(cfg_.learning_rate), eps = static_cast<T>(cfg_.eps);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
  for (auto& [gname, store] : groups) {
    for (auto& [name, e] : *store) {
      auto [it, fresh] = moments_.try_emplace(gname + "/" + name);
      if (fresh) it->second = Moments{Tensor<T>(e.value.shape()), Tensor<T>(e.value.shape())};
      T* m = it->second.m.data();
      T* v = it->second.v.data();
      T* p = e.value.data();
      const T* g = e.grad.data();
      for (std::size_t i = 0; i < e.value.size(); ++i) {
        const T gi = g[i] * clip;
        m[i] = b1 * m[i] + (T(1) - b1) * gi;
        v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
        p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    }
  }
  return norm;
}

template <typename T>
TrainMetrics train_step(FlyThinkerModel<T>& model, AdamOptimizer<T>& optimizer,
                        std::span<const EncodedSample* const> samples, const TrainConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  Batch batch = make_batch(samples);
  const auto before = model.generator.counters.full_passes + model.reasoner.counters.full_passes;
  Tape<T> tape;
  Var loss = joint_loss(tape, model, batch, cfg.policy);
  const double loss_value = static_cast<double>(tape.value(loss)[0]);
  const auto after = model.generator.counters.full_passes + model.reasoner.counters.full_passes;
  tape.backward(loss);
  optimizer.step(model);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  TrainMetrics m;
  m.step = optimizer.steps();
  m.train_loss = loss_value;
  m.tokens_per_sec = secs > 0 ? static_cast<double>(batch.real_tokens) / secs : 0.0;
  m.forwards_per_step = after - before;
  return m;
}

template <typename T>
Trainer<T>::Trainer(FlyThinkerModel<T> model, TrainConfig cfg)
    : model_(std::move(model)), cfg_(cfg), opt_(cfg), rng_(group_seed(cfg.seed, "batches")) {
  cfg_.validate();
  model_.validate();
}

template <typename T>
TrainMetrics Trainer<T>::step(std::span<const EncodedSample> train) {
  if (train.empty()) throw BatchError("training set is empty");
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  std::vector<const EncodedSample*> batch(cfg_.batch_size);
  for (auto& s : batch) s = &train[pick(rng_)];
  TrainMetrics m = train_step(model_, opt_, std::span<const EncodedSample* const>(batch), cfg_);
  m.step = ++step_;
  return m;
}

template <typename T>
double Trainer<T>::evaluate(std::span<const EncodedSample> samples) const {
  if (samples.empty()) throw BatchError("evaluation set is empty");
  double total = 0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < samples.size(); start += cfg_.batch_size) {
    const std::size_t end = std::min(samples.size(), start + cfg_.batch_size);
    std::vector<const EncodedSample*> chunk;
    for (std::size_t i = start; i < end; ++i) chunk.push_back(&samples[i]);
    Batch b = make_batch(std::span<const EncodedSample* const>(chunk));
    Tape<T> tape(false);
    Var loss = joint_loss(tape, model_, b, cfg_.policy);
    std::size_t n = 0;
    for (auto m : b.loss_mask) n += m;
    total += static_cast<double>(tape.value(loss)[0]) * static_cast<double>(n);
    count += n;
  }
  return total / static_cast<double>(count);
}

template <typename T>
std::string Trainer<T>::rng_state() const {
  std::ostringstream os;
  os << rng_;
  return os.str();
}

template <typename T>
void Trainer<T>::set_rng_state(const std::string& state) {
  std::istringstream is(state);
  std::mt19937_64 r;
  is >> r;
  if (is.fail()) throw CorruptCheckpointError("unreadable RNG state");
  rng_ = r;
}

std::vector<TrainMetrics> run_training(Trainer<float>& trainer, std::span<const EncodedSample> train,
                                       std::span<const EncodedSample> heldout, std::uint64_t until_step,
                                       const std::function<void(const TrainMetrics&)>& on_row) {
  const auto& cfg = trainer.config();
  const std::size_t n_eval = std::min<std::size_t>(heldout.size(), std::max<std::size_t>(1, cfg.heldout_eval_samples));
  const auto eval_set = heldout.subspan(0, n_eval);
  std::vector<TrainMetrics> rows;
  auto emit = [&](TrainMetrics m) {
    rows.push_back(m);
    if (on_row) on_row(m);
  };

  if (trainer.steps_done() == 0) {
    TrainMetrics m;
    const auto& model = trainer.model();
    const auto before = model.generator.counters.full_passes + model.reasoner.counters.full_passes;
    m.train_loss = trainer.evaluate(train.subspan(0, std::min(train.size(), cfg.batch_size)));
    const auto after = model.generator.counters.full_passes + model.reasoner.counters.full_passes;
    m.forwards_per_step = after - before;
    m.heldout_loss = trainer.evaluate(eval_set);
    emit(m);
  }
  double loss_sum = 0, tokens = 0;
  std::size_t since = 0;
  while (trainer.steps_done() < until_step) {
    TrainMetrics s = trainer.step(train);
    loss_sum += s.train_loss;
    tokens += s.tokens_per_sec;
    ++since;
    if (s.step % cfg.eval_every == 0) {
      TrainMetrics row = s;
      row.train_loss = loss_sum / static_cast<double>(since);
      row.heldout_loss = trainer.evaluate(eval_set);
      row.tokens_per_sec = tokens / static_cast<double>(since);
      emit(row);
      loss_sum = tokens = 0;
      since = 0;
    }
  }
  return rows;
}

void write_metrics_csv(const std::string& path, std::span<const TrainMetrics> rows, const std::string& config_hash) {
  std::string out = std::string(kMetricsCsvHeader) + "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + format_double(r.train_loss) + "," + format_double(r.heldout_loss) + "," +
           format_double(r.tokens_per_sec) + "," + std::to_string(r.forwards_per_step) + "\n";
  }
  out += "# config_hash=" + config_hash + "\n";
  write_file(path, out);
}

GradCheckReport grad_check_joint(FlyThinkerModel<double>& model, std::span<const EncodedSample* const> samples,
                                 Policy policy, double h, double floor) {
  const Batch batch = make_batch(samples);
  {
    Tape<double> tape;
    Var loss = joint_loss(tape, model, batch, policy);
    tape.backward(loss);
  }
  auto loss_at = [&]() {
    Tape<double> tape(false);
    return tape.value(joint_loss(tape, model, batch, policy))[0];
  };
  GradCheckReport report;
  for (auto& [gname, store] : parameter_groups(model)) {
    double& group_max = report.max_rel_error_by_group[gname];
    for (auto& [name, e] : *store) {
      for (std::size_t i = 0; i < e.value.size(); ++i) {
        const double orig = e.value[i];
        e.value[i] = orig + h;
        const double up = loss_at();
        e.value[i] = orig - h;
        const double down = loss_at();
        e.value[i] = orig;
        const double numeric = (up - down) / (2 * h);
        const double analytic = e.grad[i];
        const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
        group_max = std::max(group_max, rel);
        if (rel > report.max_rel_error) {
          report.max_rel_error = rel;
          report.worst_parameter = gname + "/" + name + "[" + std::to_string(i) + "]";
        }
        ++report.checked;
      }
    }
  }
  return report;
}

#define FLYTHINKER_INSTANTIATE(T)                                                                               \
  template Var joint_loss<T>(Tape<T>&, const FlyThinkerModel<T>&, const Batch&, Policy,                         \
                             const std::vector<std::uint8_t>*);                                                 \
  template double compute_loss<T>(const Tensor<T>&, std::span<const TokenId>, std::span<const std::uint8_t>);   \
  template std::vector<std::pair<std::string, ParamStore<T>*>> parameter_groups<T>(FlyThinkerModel<T>&);        \
  template std::vector<std::pair<std::string, const ParamStore<T>*>> parameter_groups<T>(                       \
      const FlyThinkerModel<T>&);                                                                               \
  template class AdamOptimizer<T>;                                                                              \
  template TrainMetrics train_step<T>(FlyThinkerModel<T>&, AdamOptimizer<T>&, std::span<const EncodedSample* const>, \
                                      const TrainConfig&);                                                      \
  template class Trainer<T>;

FLYTHINKER_INSTANTIATE(float)
FLYTHINKER_INSTANTIATE(double)
#undef FLYTHINKER_INSTANTIATE

}  // namespace flythinker
