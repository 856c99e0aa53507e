// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#include "flythinker/decoder.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <condition_variable>
#include <exception>
#include <mutex>
#include <random>
#include <thread>

#include "flythinker/io.hpp"

namespace flythinker {

std::string to_string(DecodeMode m) { return m == DecodeMode::sample ? "sample" : "greedy"; }

DecodeMode decode_mode_from_string(const std::string& s) {
  if (s == "greedy") return DecodeMode::greedy;
  if (s == "sample") return DecodeMode::sample;
  throw ConfigError("unknown decode mode '" + s + "' (expected greedy or sample)");
}

void DecodeConfig::validate() const {
  if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
  if (mode == DecodeMode::sample && !(temperature > 0)) throw ConfigError("temperature must be > 0 when sampling");
  if (!(rendezvous_timeout_s > 0)) throw ConfigError("rendezvous_timeout_s must be > 0");
}

template <typename T>
TokenId argmax_lowest(std::span<const T> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

template TokenId argmax_lowest<float>(std::span<const float>);
template TokenId argmax_lowest<double>(std::span<const double>);

namespace {

using Clock = std::chrono::steady_clock;

Nanos since(Clock::time_point t0) { return std::chrono::duration_cast<Nanos>(Clock::now() - t0); }

class Selector {
 public:
  explicit Selector(const DecodeConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {}

  TokenId pick(std::span<const float> logits) {
    if (cfg_.mode == DecodeMode::greedy) return argmax_lowest(logits);
    const double inv_t = 1.0 / cfg_.temperature;
    double mx = -std::numeric_limits<double>::infinity();
    for (float v : logits) mx = std::max(mx, static_cast<double>(v) * inv_t);
    probs_.resize(logits.size());
    double z = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      probs_[i] = std::exp(static_cast<double>(logits[i]) * inv_t - mx);
      z += probs_[i];
    }
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng_) * z;
    double cum = 0;
    std::size_t last_nonzero = 0;
    for (std::size_t i = 0; i < probs_.size(); ++i) {
      if (probs_[i] <= 0) continue;
      cum += probs_[i];
      last_nonzero = i;
      if (u < cum) return static_cast<TokenId>(i);
    }
    return static_cast<TokenId>(last_nonzero);
  }

 private:
  DecodeConfig cfg_;
  std::mt19937_64 rng_;
  std::vector<double> probs_;
};

void check_prompt(std::span<const TokenId> prompt, std::size_t max_len, std::size_t reserved = 0) {
  if (prompt.empty()) throw LengthError("empty prompt");
  if (prompt.size() + reserved >= max_len) {
    throw LengthError("prompt of " + std::to_string(prompt.size()) + " tokens leaves no room under max_len " +
                      std::to_string(max_len));
  }
}

bool should_stop(const DecodeConfig& cfg, TokenId y) { return cfg.stop_token && *cfg.stop_token == y; }

// Both caches prefilled over the prompt: the Reasoner on plain tokens, the
// Generator on the fused prompt.
struct FlyState {
  DecodeCache<float> gen_cache;
  DecodeCache<float> rsn_cache;
  Tensor<float> logits;  // next-token logits after the prompt
  Tensor<float> latent;  // latent tapped at position P - 1
  std::size_t prompt_len = 0;
  std::size_t max_tokens = 0;
};

FlyState prefill_fly(const FlyThinkerModel<float>& model, std::span<const TokenId> prompt, const DecodeConfig& cfg) {
  const std::size_t P = prompt.size();
  const std::size_t max_len = std::min(model.generator.config.max_len, model.reasoner.config.max_len);
  check_prompt(prompt, max_len);
  FlyState s{DecodeCache<float>(model.generator.config), DecodeCache<float>(model.reasoner.config), {}, {}, P,
             std::min(cfg.max_steps, max_len - P)};

  PrefillOutput<float> r = prefill(model.reasoner, s.rsn_cache, token_embeddings(model.reasoner, prompt));
  LatentThoughts<float> lat;
  lat.vectors = model.projection ? project_latent(r.hidden, model.projection->value(kProjectionWeight))
                                 : std::move(r.hidden);
  s.latent = lat.vectors.slice_rows(P - 1, P);
  Tensor<float> fused = fuse(token_embeddings(model.generator, prompt), lat, model.fusion, PromptLayout{P, 0});
  s.logits = prefill(model.generator, s.gen_cache, fused).last_logits;
  return s;
}

// Generator input for token `y` at `pos`, fused with `latent` when enhanced.
Tensor<float> step_embedding(const FlyThinkerModel<float>& model, TokenId y, std::size_t pos, std::size_t prompt_len,
                             const Tensor<float>& latent, bool* enhanced) {
  const TokenId one[] = {y};
  Tensor<float> e = token_embeddings(model.generator, one);
  *enhanced = is_enhanced(pos, prompt_len, model.fusion.region);
  if (*enhanced) {
    const float f = static_cast<float>(model.fusion.lambda);
    float* o = e.data();
    const float* x = latent.data();
    for (std::size_t j = 0; j < e.size(); ++j) o[j] += f * x[j];
  }
  return e;
}

// Single-slot handoff between the two decode workers.
template <typename V>
class Mailbox {
 public:
  explicit Mailbox(bool spin) : spin_(spin) {}

  void put(V v) {
    {
      std::lock_guard<std::mutex> lk(mu_);
      slot_ = std::move(v);
      signaled_.store(true, std::memory_order_release);
    }
    cv_.notify_one();
  }

  void close() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      closed_ = true;
      signaled_.store(true, std::memory_order_release);
    }
    cv_.notify_one();
  }

  void fail(std::exception_ptr e) {
    {
      std::lock_guard<std::mutex> lk(mu_);
      error_ = std::move(e);
      signaled_.store(true, std::memory_order_release);
    }
    cv_.notify_one();
  }

  // nullopt once closed and drained.
  std::optional<V> take(double timeout_s) {
    if (spin_) {
      for (int i = 0; i < 200000 && !signaled_.load(std::memory_order_acquire); ++i) {
#if defined(__x86_64__) || defined(__i386__)
        __builtin_ia32_pause();
#endif
      }
    }
    std::unique_lock<std::mutex> lk(mu_);
    const auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                             std::chrono::duration<double>(timeout_s));
    if (!cv_.wait_until(lk, deadline, [&] { return slot_.has_value() || closed_ || error_; })) {
      throw DeadlockError("decode rendezvous timed out after " + format_double(timeout_s) + " s");
    }
    if (error_) std::rethrow_exception(error_);
    if (slot_) {
      std::optional<V> out = std::move(slot_);
      slot_.reset();
      signaled_.store(closed_, std::memory_order_release);
      return out;
    }
    return std::nullopt;
  }

 private:
  bool spin_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::atomic<bool> signaled_{false};
  std::optional<V> slot_;
  bool closed_ = false;
  std::exception_ptr error_;
};

struct TokenMsg {
  TokenId token;
  std::size_t step;
};

std::vector<double> step_latencies_us(const DecodeResult& r) {
  std::vector<double> out;
  for (std::size_t i = 1; i < r.per_step_latency.size(); ++i) out.push_back(r.per_step_latency[i].count() / 1e3);
  return out;
}

}  // namespace

DecodeResult decode_sequential(const FlyThinkerModel<float>& model, std::span<const TokenId> prompt,
                               const DecodeConfig& cfg) {
  cfg.validate();
  const auto t0 = Clock::now();
  FlyState s = prefill_fly(model, prompt, cfg);
  const std::size_t P = s.prompt_len;
  DecodeResult res;
  res.steps_executed = 1;
  Selector sel(cfg);
  auto last = t0;
  for (std::size_t t = 0;; ++t) {
    const TokenId y = sel.pick(s.logits.values());
    res.tokens.push_back(y);
    const auto now = Clock::now();
    res.per_step_latency.push_back(std::chrono::duration_cast<Nanos>(now - last));
    last = now;
    if (should_stop(cfg, y) || res.tokens.size() >= s.max_tokens) break;

    const std::size_t pos = P + t;
    bool enhanced = false;
    Tensor<float> emb = step_embedding(model, y, pos, P, s.latent, &enhanced);
    res.provenance.push_back({pos, enhanced ? static_cast<std::int64_t>(pos - 1) : -1, pos});
    const auto g0 = since(t0);
    s.logits = incremental_step(model.generator, s.gen_cache, std::span<const float>(emb.values())).logits;
    const auto g1 = since(t0);
    s.latent = reason_step(model.reasoner, model.projection_store(), s.rsn_cache, y);
    const auto r1 = since(t0);
    res.worker_timeline.push_back({0, t, g0, g1});
    res.worker_timeline.push_back({1, t, g1, r1});
    ++res.steps_executed;
  }
  res.total_wall = since(t0);
  return res;
}

DecodeResult decode_staggered(const FlyThinkerModel<float>& model, std::span<const TokenId> prompt,
                              const DecodeConfig& cfg) {
  cfg.validate();
  const auto t0 = Clock::now();
  FlyState s = prefill_fly(model, prompt, cfg);
  const std::size_t P = s.prompt_len;
  const bool spin = std::thread::hardware_concurrency() >= 2;
  Mailbox<TokenMsg> to_reasoner(spin);
  Mailbox<Tensor<float>> to_generator(spin);
  std::vector<WorkerInterval> reasoner_timeline;

  auto reasoner_loop = [&, cache = std::move(s.rsn_cache)]() mutable {
    try {
      while (auto msg = to_reasoner.take(cfg.rendezvous_timeout_s)) {
        const auto b0 = since(t0);
        Tensor<float> r = reason_step(model.reasoner, model.projection_store(), cache, msg->token);
        reasoner_timeline.push_back({1, msg->step, b0, since(t0)});
        to_generator.put(std::move(r));
      }
    } catch (...) {
      to_generator.fail(std::current_exception());
    }
  };
  std::thread worker;
  try {
    worker = std::thread(std::move(reasoner_loop));
  } catch (const std::system_error& e) {
    throw WorkerError(std::string("cannot start the reasoning worker: ") + e.what());
  }
  struct Joiner {
    Mailbox<TokenMsg>& box;
    std::thread& th;
    ~Joiner() {
      box.close();
      if (th.joinable()) th.join();
    }
  } joiner{to_reasoner, worker};

  DecodeResult res;
  res.steps_executed = 1;
  Selector sel(cfg);
  auto last = t0;
  for (std::size_t t = 0;; ++t) {
    const TokenId y = sel.pick(s.logits.values());
    res.tokens.push_back(y);
    const auto now = Clock::now();
    res.per_step_latency.push_back(std::chrono::duration_cast<Nanos>(now - last));
    last = now;
    if (should_stop(cfg, y) || res.tokens.size() >= s.max_tokens) break;

    // phase one: hand the token over, then step the Generator on the
    // latent that is already here
    to_reasoner.put(TokenMsg{y, t});
    const std::size_t pos = P + t;
    bool enhanced = false;
    Tensor<float> emb = step_embedding(model, y, pos, P, s.latent, &enhanced);
    res.provenance.push_back({pos, enhanced ? static_cast<std::int64_t>(pos - 1) : -1, pos});
    const auto g0 = since(t0);
    s.logits = incremental_step(model.generator, s.gen_cache, std::span<const float>(emb.values())).logits;
    res.worker_timeline.push_back({0, t, g0, since(t0)});
    // phase two: collect the latent for the next position
    auto r = to_generator.take(cfg.rendezvous_timeout_s);
    if (!r) throw WorkerError("reasoning worker exited early");
    s.latent = std::move(*r);
    ++res.steps_executed;
  }
  to_reasoner.close();
  worker.join();
  res.total_wall = since(t0);
  res.worker_timeline.insert(res.worker_timeline.end(), reasoner_timeline.begin(), reasoner_timeline.end());
  std::stable_sort(res.worker_timeline.begin(), res.worker_timeline.end(),
                   [](const WorkerInterval& a, const WorkerInterval& b) {
                     return a.step != b.step ? a.step < b.step : a.worker < b.worker;
                   });
  return res;
}

DecodeResult decode_baseline_sft(const TransformerParams<float>& generator, std::span<const TokenId> prompt,
                                 const DecodeConfig& cfg) {
  return decode_baseline_seq_latent(generator, prompt, 0, cfg);
}

DecodeResult decode_baseline_seq_latent(const TransformerParams<float>& generator, std::span<const TokenId> prompt,
                                        std::size_t n_latent, const DecodeConfig& cfg) {
  cfg.validate();
  const std::size_t max_len = generator.config.max_len;
  check_prompt(prompt, max_len, n_latent);
  const auto t0 = Clock::now();
  DecodeCache<float> cache(generator.config);
  PrefillOutput<float> pre = prefill(generator, cache, token_embeddings(generator, prompt));
  Tensor<float> logits = std::move(pre.last_logits);
  Tensor<float> h = pre.hidden.slice_rows(pre.hidden.rows() - 1, pre.hidden.rows());
  DecodeResult res;
  res.steps_executed = 1;
  for (std::size_t k = 0; k < n_latent; ++k) {
    StepOutput<float> o = incremental_step(generator, cache, std::span<const float>(h.values()), k + 1 == n_latent);
    h = std::move(o.hidden);
    if (k + 1 == n_latent) logits = std::move(o.logits);
    ++res.steps_executed;
  }
  const std::size_t max_tokens = std::min(cfg.max_steps, max_len - prompt.size() - n_latent);
  Selector sel(cfg);
  auto last = t0;
  while (true) {
    const TokenId y = sel.pick(logits.values());
    res.tokens.push_back(y);
    const auto now = Clock::now();
    res.per_step_latency.push_back(std::chrono::duration_cast<Nanos>(now - last));
    last = now;
    if (should_stop(cfg, y) || res.tokens.size() >= max_tokens) break;
    const TokenId one[] = {y};
    const Tensor<float> e = token_embeddings(generator, one);
    const auto g0 = since(t0);
    logits = incremental_step(generator, cache, std::span<const float>(e.values())).logits;
    res.worker_timeline.push_back({0, res.tokens.size() - 1, g0, since(t0)});
    ++res.steps_executed;
  }
  res.total_wall = since(t0);
  return res;
}

double timeline_overlap_fraction(const DecodeResult& r) {
  std::map<std::size_t, std::pair<const WorkerInterval*, const WorkerInterval*>> by_step;
  for (const auto& w : r.worker_timeline) {
    auto& slot = by_step[w.step];
    (w.worker == 0 ? slot.first : slot.second) = &w;
  }
  std::size_t both = 0, overlapping = 0;
  for (const auto& [step, p] : by_step) {
    if (!p.first || !p.second) continue;
    ++both;
    if (std::max(p.first->start, p.second->start) < std::min(p.first->end, p.second->end)) ++overlapping;
  }
  return both == 0 ? 0.0 : static_cast<double>(overlapping) / static_cast<double>(both);
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

const BenchRow& BenchReport::row(const std::string& policy) const {
  for (const auto& r : rows) {
    if (r.policy == policy) return r;
  }
  throw ConfigError("bench report has no policy '" + policy + "'");
}

BenchReport bench(const FlyThinkerModel<float>& model, std::span<const std::vector<TokenId>> prompts,
                  const DecodeConfig& cfg_in, const BenchOptions& opts) {
  if (prompts.empty()) throw ConfigError("bench needs at least one prompt");
  DecodeConfig cfg = cfg_in;
  cfg.stop_token.reset();  // fixed output length
  cfg.validate();
  if (cfg.max_steps < 8) throw BenchAdvisoryError("bench needs at least 8 generated tokens to resolve per-token latency");
  const std::size_t N1 = cfg.max_steps;

  for (std::size_t w = 0; w < opts.warmup; ++w) {
    const auto& p = prompts[w % prompts.size()];
    decode_baseline_sft(model.generator, p, cfg);
    decode_staggered(model, p, cfg);
    decode_baseline_seq_latent(model.generator, p, N1, cfg);
  }

  std::vector<double> sft_total, stag_total, seq_total, sft_tok, stag_tok, seq_tok, cg, cr, ell_r;
  for (const auto& p : prompts) {
    DecodeResult a = decode_baseline_sft(model.generator, p, cfg);
    DecodeResult b = decode_staggered(model, p, cfg);
    DecodeResult c = decode_baseline_seq_latent(model.generator, p, N1, cfg);
    if (a.tokens.size() != N1 || b.tokens.size() != N1 || c.tokens.size() != N1) {
      throw LengthError("bench prompt leaves no room for " + std::to_string(N1) + " tokens");
    }
    sft_total.push_back(a.total_wall.count() / 1e6);
    stag_total.push_back(b.total_wall.count() / 1e6);
    seq_total.push_back(c.total_wall.count() / 1e6);
    sft_tok.push_back(median(step_latencies_us(a)));
    stag_tok.push_back(median(step_latencies_us(b)));
    seq_tok.push_back(median(step_latencies_us(c)));

    // isolated single-step costs at the end of the prompt
    DecodeCache<float> gproto(model.generator.config), rproto(model.reasoner.config);
    prefill(model.generator, gproto, token_embeddings(model.generator, p));
    prefill(model.reasoner, rproto, token_embeddings(model.reasoner, p));
    const TokenId probe[] = {a.tokens.front()};
    const Tensor<float> ge = token_embeddings(model.generator, probe);
    std::vector<double> g_us, r_us;
    for (std::size_t k = 0; k < opts.micro_repeats; ++k) {
      DecodeCache<float> gc = gproto, rc = rproto;
      auto q0 = Clock::now();
      incremental_step(model.generator, gc, std::span<const float>(ge.values()));
      g_us.push_back(since(q0).count() / 1e3);
      q0 = Clock::now();
      reason_step(model.reasoner, model.projection_store(), rc, probe[0]);
      r_us.push_back(since(q0).count() / 1e3);
    }
    cg.push_back(median(g_us));
    cr.push_back(median(r_us));

    // Reasoner-only rollout over the emitted tokens
    DecodeCache<float> rc(model.reasoner.config);
    prefill(model.reasoner, rc, token_embeddings(model.reasoner, p));
    std::vector<double> steps;
    for (std::size_t i = 0; i + 1 < a.tokens.size(); ++i) {
      const auto q0 = Clock::now();
      reason_step(model.reasoner, model.projection_store(), rc, a.tokens[i]);
      steps.push_back(since(q0).count() / 1e3);
    }
    ell_r.push_back(median(steps));
  }

  BenchReport rep;
  rep.hardware_threads = std::thread::hardware_concurrency();
  const std::uint64_t pg = model.generator.parameter_count();
  std::uint64_t pr = model.reasoner.parameter_count();
  if (model.projection) pr += model.projection->parameter_count();
  BenchRow base;
  base.params_G = pg;
  base.N1 = N1;
  base.C_G_us = median(cg);
  base.C_R_us = median(cr);
  base.ell_G_us = median(sft_tok);
  base.ell_R_us = median(ell_r);
  for (double v : {base.C_G_us, base.C_R_us, base.ell_G_us, base.ell_R_us}) {
    if (!(v > 0)) throw BenchAdvisoryError("measured duration is zero; timer resolution is insufficient");
  }

  BenchRow sft = base, fly = base, seq = base;
  sft.policy = "sft";
  sft.total_ms = median(sft_total);
  fly.policy = "flythinker_staggered";
  fly.params_R = pr;
  fly.N2 = N1;
  fly.total_ms = median(stag_total);
  seq.policy = "sequential_latent";
  seq.N2 = N1;
  seq.total_ms = median(seq_total);
  rep.rows = {sft, fly, seq};
  rep.per_token_us = {{"sft", median(sft_tok)}, {"flythinker_staggered", median(stag_tok)},
                      {"sequential_latent", median(seq_tok)}};
  return rep;
}

std::string bench_csv(const BenchReport& report, const std::string& config_hash) {
  std::string out = std::string(kBenchCsvHeader) + "\n";
  for (const auto& r : report.rows) {
    out += r.policy + "," + std::to_string(r.params_G) + "," + std::to_string(r.params_R) + "," +
           std::to_string(r.N1) + "," + std::to_string(r.N2) + "," + format_double(r.C_G_us) + "," +
           format_double(r.C_R_us) + "," + format_double(r.ell_G_us) + "," + format_double(r.ell_R_us) + "," +
           format_double(r.total_ms) + "\n";
  }
  out += "# config_hash=" + config_hash + "\n";
  return out;
}

namespace {

template <typename N>
N parse_number(const std::string& s, const char* what) {
  N v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(std::string("bad bench CSV ") + what + " '" + s + "'");
  return v;
}

}  // namespace

std::vector<BenchRow> parse_bench_csv(const std::string& text) {
  std::vector<BenchRow> rows;
  bool header = false;
  for (const auto& line : split(text, '\n')) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != kBenchCsvHeader) throw ConfigError("bench CSV header mismatch: '" + line + "'");
      header = true;
      continue;
    }
    const auto f = split(line, ',');
    if (f.size() != 10) throw ConfigError("bench CSV row has " + std::to_string(f.size()) + " fields");
    BenchRow r;
    r.policy = f[0];
    r.params_G = parse_number<std::uint64_t>(f[1], "params_G");
    r.params_R = parse_number<std::uint64_t>(f[2], "params_R");
    r.N1 = parse_number<std::uint64_t>(f[3], "N1");
    r.N2 = parse_number<std::uint64_t>(f[4], "N2");
    r.C_G_us = parse_number<double>(f[5], "C_G_us");
    r.C_R_us = parse_number<double>(f[6], "C_R_us");
    r.ell_G_us = parse_number<double>(f[7], "ell_G_us");
    r.ell_R_us = parse_number<double>(f[8], "ell_R_us");
    r.total_ms = parse_number<double>(f[9], "total_ms");
    rows.push_back(r);
  }
  if (!header) throw ConfigError("bench CSV has no header");
  return rows;
}

}  // namespace flythinker
