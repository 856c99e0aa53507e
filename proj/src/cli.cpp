// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#include "flythinker/cli.hpp"

#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "flythinker/io.hpp"

namespace flythinker {

Workspace make_workspace(const RunConfig& cfg, Corpus corpus) {
  Workspace ws;
  ws.config = cfg;
  ws.hash = config_hash(cfg);
  ws.corpus = std::move(corpus);
  ws.train = encode_samples(ws.corpus, false);
  ws.heldout = encode_samples(ws.corpus, true);
  const std::size_t max_len = std::min(cfg.generator.max_len, cfg.reasoner.max_len);
  for (const auto* set : {&ws.train, &ws.heldout}) {
    for (const auto& s : *set) {
      if (s.tokens.size() > max_len) {
        throw ConfigError("sample " + std::to_string(s.sample_id) + " has " + std::to_string(s.tokens.size()) +
                          " tokens, more than max_len " + std::to_string(max_len));
      }
    }
  }
  return ws;
}

Workspace open_workspace(const RunConfig& cfg) {
  const std::string dir = cfg.path(cfg.paths.dataset_dir);
  if (!std::filesystem::exists(std::filesystem::path(dir) / "manifest.json")) {
    Corpus c = generate_corpus(cfg.corpus);
    write_dataset(c, dir, config_hash(cfg));
    return make_workspace(cfg, std::move(c));
  }
  Corpus c = read_dataset(dir);
  const auto& a = c.config;
  const auto& b = cfg.corpus;
  if (a.n_users != b.n_users || a.samples_per_user != b.samples_per_user || a.style_space != b.style_space ||
      a.history_len != b.history_len || a.heldout_fraction != b.heldout_fraction || a.seed != b.seed) {
    throw ConfigMismatchError("dataset in '" + dir + "' was generated with a different corpus config");
  }
  return make_workspace(cfg, std::move(c));
}

FlyThinkerModel<float> init_model(const RunConfig& cfg) {
  return FlyThinkerModel<float>::init(cfg.generator, cfg.reasoner, cfg.fusion, cfg.seed);
}

TrainRun train_run(const RunConfig& cfg, std::span<const EncodedSample> train, std::span<const EncodedSample> heldout,
                   const Checkpoint* resume, bool allow_mismatch,
                   const std::function<void(const TrainMetrics&)>& on_row) {
  const std::string hash = config_hash(cfg);
  Trainer<float> trainer(init_model(cfg), cfg.train);
  if (resume) {
    if (hex64(resume->config_hash) != hash && !allow_mismatch) {
      throw ConfigMismatchError("checkpoint config hash " + hex64(resume->config_hash) + " differs from run config hash " +
                                hash + " (pass --allow-config-mismatch to override)");
    }
    restore_checkpoint(trainer, *resume);
  }
  TrainRun out;
  out.rows = run_training(trainer, train, heldout, cfg.train.steps, on_row);
  out.checkpoint = capture_checkpoint(trainer, parse_hash(hash));
  return out;
}

std::vector<SweepRow> lambda_sweep(const RunConfig& cfg, std::span<const EncodedSample> train,
                                   std::span<const EncodedSample> heldout, std::span<const double> lambdas) {
  std::vector<SweepRow> rows;
  for (double lambda : lambdas) {
    RunConfig c = cfg;
    c.fusion.lambda = lambda;
    c.train.policy = Policy::flythinker;
    c.train.eval_every = std::max<std::size_t>(1, c.train.steps);
    c.validate();
    const TrainRun r = train_run(c, train, heldout);
    const TrainMetrics& last = r.rows.back();
    rows.push_back({lambda, last.step, last.train_loss, last.heldout_loss});
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows, const std::string& config_hash) {
  std::string out = std::string(kSweepCsvHeader) + "\n";
  for (const auto& r : rows) {
    out += format_double(r.lambda) + "," + std::to_string(r.steps) + "," + format_double(r.train_loss) + "," +
           format_double(r.heldout_loss) + "\n";
  }
  out += "# config_hash=" + config_hash + "\n";
  return out;
}

SegmentedScores evaluate_model(const FlyThinkerModel<float>& model, Policy policy,
                               std::span<const EncodedSample> samples, std::size_t n, const DecodeConfig& decode,
                               std::size_t k) {
  DecodeConfig cfg = decode;
  cfg.mode = DecodeMode::greedy;
  cfg.stop_token = Vocabulary::kEos;
  std::vector<std::pair<Tokens, Tokens>> pairs;
  for (std::size_t i = 0; i < std::min(n, samples.size()); ++i) {
    const auto& s = samples[i];
    const std::span<const TokenId> prompt(s.tokens.data(), s.prompt_len);
    DecodeResult r = policy == Policy::sft ? decode_baseline_sft(model.generator, prompt, cfg)
                                           : decode_sequential(model, prompt, cfg);
    if (!r.tokens.empty() && r.tokens.back() == Vocabulary::kEos) r.tokens.pop_back();
    Tokens ref(s.tokens.begin() + static_cast<std::ptrdiff_t>(s.prompt_len), s.tokens.end() - 1);
    pairs.emplace_back(std::move(r.tokens), std::move(ref));
  }
  return segment_eval(pairs, k);
}

std::vector<GradCheckCase> grad_check_suite(std::uint64_t seed) {
  std::vector<GradCheckCase> out;
  const ModelConfig g{1, 2, 8, 16, 16, 16, false};
  for (std::size_t dr : {std::size_t{8}, std::size_t{4}}) {
    const ModelConfig r{1, 2, dr, 2 * dr, 16, 16, false};
    auto model = FlyThinkerModel<double>::init(g, r, FusionConfig{0.5, Region::global}, seed);
    std::mt19937_64 rng(group_seed(seed, "gradcheck"));
    std::uniform_int_distribution<TokenId> tok(0, 15);
    std::vector<EncodedSample> samples(2);
    samples[0].prompt_len = 3;
    samples[1].prompt_len = 2;
    for (std::size_t i = 0; i < 7; ++i) samples[0].tokens.push_back(tok(rng));
    for (std::size_t i = 0; i < 5; ++i) samples[1].tokens.push_back(tok(rng));
    const EncodedSample* ptrs[] = {&samples[0], &samples[1]};

    GradCheckCase c;
    c.name = dr == g.d_model ? "matched_d8" : "projected_d8_d4";
    c.report = grad_check_joint(model, ptrs);

    model.fusion.lambda = 0.0;
    const Batch b = make_batch(ptrs);
    Tape<double> tape;
    tape.backward(joint_loss(tape, model, b, Policy::flythinker));
    bool zero = true;
    for (const auto& [name, e] : model.reasoner.store) {
      for (double v : e.grad.values()) zero &= v == 0.0;
    }
    if (model.projection) {
      for (const auto& [name, e] : *model.projection) {
        for (double v : e.grad.values()) zero &= v == 0.0;
      }
    }
    c.reasoner_grad_zero_at_lambda0 = zero;
    out.push_back(std::move(c));
  }
  return out;
}

// --- command line -----------------------------------------------------------

namespace {

std::string escape(const std::string& s) {
  std::string o;
  for (char ch : s) {
    if (ch == '"' || ch == '\\') {
      o += '\\';
      o += ch;
    } else if (ch == '\n') {
      o += "\\n";
    } else {
      o += ch;
    }
  }
  return o;
}

void report_error(std::ostream& err, const std::string& kind, const std::string& message) {
  err << "flythinker: error kind=" << kind << " message=\"" << escape(message) << "\"\n";
}

std::vector<TrainMetrics> parse_metrics_csv(const std::string& text) {
  std::vector<TrainMetrics> rows;
  for (const auto& line : split(text, '\n')) {
    if (line.empty() || line[0] == '#' || line == kMetricsCsvHeader) continue;
    const auto f = split(line, ',');
    if (f.size() != 5) throw IoError("metrics CSV row has " + std::to_string(f.size()) + " fields");
    TrainMetrics m;
    m.step = std::stoull(f[0]);
    m.train_loss = std::stod(f[1]);
    m.heldout_loss = std::stod(f[2]);
    m.tokens_per_sec = std::stod(f[3]);
    m.forwards_per_step = std::stoull(f[4]);
    rows.push_back(m);
  }
  return rows;
}

struct Options {
  std::string config;
  std::string checkpoint;
  std::vector<std::string> checkpoints;
  std::vector<std::string> labels;
  std::string policy;
  std::string resume;
  std::string mode;
  std::size_t steps = 0;
  std::size_t sweep_steps = 0;
  std::size_t limit = 0;
  bool allow_mismatch = false;
  bool sweep = false;
};

RunConfig load(const Options& o) { return o.config.empty() ? parse_run_config("{}") : load_run_config(o.config); }

int cmd_gen_data(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = load(o);
  const Corpus c = generate_corpus(cfg.corpus);
  for (const auto& w : c.warnings) err << "flythinker: warning " << w << "\n";
  const std::string dir = cfg.path(cfg.paths.dataset_dir);
  const std::string hash = write_dataset(c, dir, config_hash(cfg));
  out << "dataset=" << dir << " samples=" << c.samples.size() << " users=" << cfg.corpus.n_users
      << " heldout_users=" << c.heldout_users.size() << " vocab=" << c.vocab.size() << " corpus_hash=" << hash
      << " config_hash=" << config_hash(cfg) << "\n";
  return 0;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load(o);
  if (!o.policy.empty()) cfg.train.policy = policy_from_string(o.policy);
  if (o.steps) cfg.train.steps = o.steps;
  const Workspace ws = open_workspace(cfg);
  for (const auto& w : ws.corpus.warnings) err << "flythinker: warning " << w << "\n";

  if (o.sweep) {
    if (o.sweep_steps) cfg.train.steps = o.sweep_steps;
    const auto rows = lambda_sweep(cfg, ws.train, ws.heldout, kLambdaSweep);
    const std::string path = cfg.path(cfg.paths.sweep_csv);
    write_file(path, sweep_csv(rows, ws.hash));
    for (const auto& r : rows) {
      out << "lambda=" << format_double(r.lambda) << " steps=" << r.steps << " train_loss=" << format_double(r.train_loss)
          << " heldout_loss=" << format_double(r.heldout_loss) << "\n";
    }
    out << "sweep_csv=" << path << "\n";
    return 0;
  }

  std::optional<Checkpoint> resume;
  std::vector<TrainMetrics> rows;
  const std::string metrics_path = cfg.path(cfg.paths.metrics_csv);
  if (!o.resume.empty()) {
    resume = load_checkpoint(o.resume);
    if (std::filesystem::exists(metrics_path)) {
      for (const auto& r : parse_metrics_csv(read_file(metrics_path))) {
        if (r.step <= resume->step) rows.push_back(r);
      }
    }
  }
  auto on_row = [&](const TrainMetrics& m) {
    out << "step=" << m.step << " train_loss=" << format_double(m.train_loss)
        << " heldout_loss=" << format_double(m.heldout_loss) << " tokens_per_sec=" << format_double(m.tokens_per_sec)
        << " forwards_per_step=" << m.forwards_per_step << "\n";
  };
  const TrainRun run = train_run(cfg, ws.train, ws.heldout, resume ? &*resume : nullptr, o.allow_mismatch, on_row);
  rows.insert(rows.end(), run.rows.begin(), run.rows.end());
  const std::string ckpt_path = o.checkpoint.empty() ? cfg.path(cfg.paths.checkpoint) : o.checkpoint;
  save_checkpoint(ckpt_path, run.checkpoint);
  write_metrics_csv(metrics_path, rows, ws.hash);
  out << "checkpoint=" << ckpt_path << " metrics_csv=" << metrics_path << " config_hash=" << ws.hash << "\n";
  return 0;
}

Checkpoint checkpoint_for(const Options& o, const RunConfig& cfg) {
  const std::string path = o.checkpoint.empty() ? cfg.path(cfg.paths.checkpoint) : o.checkpoint;
  Checkpoint c = load_checkpoint(path);
  check_model_configs(c, cfg.generator, cfg.reasoner);
  return c;
}

// Ids past the corpus vocabulary (the model vocabulary is larger) print as <id:N>.
std::string render(const Vocabulary& v, std::span<const TokenId> ids) {
  std::string out;
  for (TokenId t : ids) {
    if (!out.empty()) out += ' ';
    out += t >= 0 && static_cast<std::size_t>(t) < v.size() ? v.word(t) : "<id:" + std::to_string(t) + ">";
  }
  return out;
}

int cmd_decode(const Options& o, std::ostream& out, std::ostream&) {
  const RunConfig cfg = load(o);
  const Workspace ws = open_workspace(cfg);
  const Checkpoint ck = checkpoint_for(o, cfg);
  const FlyThinkerModel<float> model = model_from_checkpoint(ck);
  std::string mode = o.mode.empty() ? (ck.policy == Policy::sft ? "sft" : "staggered") : o.mode;
  if (mode != "staggered" && mode != "sequential" && mode != "sft") {
    throw ConfigError("unknown decode mode '" + mode + "' (expected staggered, sequential or sft)");
  }
  const std::size_t n = std::min(o.limit ? o.limit : cfg.decode_samples, ws.heldout.size());
  std::string text;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = ws.heldout[i];
    const std::span<const TokenId> prompt(s.tokens.data(), s.prompt_len);
    const DecodeResult r = mode == "sft"          ? decode_baseline_sft(model.generator, prompt, cfg.decode)
                           : mode == "sequential" ? decode_sequential(model, prompt, cfg.decode)
                                                  : decode_staggered(model, prompt, cfg.decode);
    text += "# sample_id=" + std::to_string(s.sample_id) + " user_id=" + std::to_string(s.user_id) + " mode=" + mode + "\n";
    std::string ids;
    for (TokenId t : r.tokens) ids += (ids.empty() ? "" : " ") + std::to_string(t);
    text += "ids: " + ids + "\n";
    text += "text: " + render(ws.corpus.vocab, r.tokens) + "\n";
  }
  text += "# config_hash=" + ws.hash + "\n";
  const std::string path = cfg.path(cfg.paths.transcript);
  write_file(path, text);
  out << "transcript=" << path << " samples=" << n << "\n";
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = load(o);
  const Workspace ws = open_workspace(cfg);
  std::string csv = std::string(kSegmentCsvHeader) + "\n";
  for (std::size_t i = 0; i < o.checkpoints.size(); ++i) {
    Checkpoint ck = load_checkpoint(o.checkpoints[i]);
    check_model_configs(ck, cfg.generator, cfg.reasoner);
    const std::string label = i < o.labels.size() ? o.labels[i] : to_string(ck.policy);
    const SegmentedScores s = evaluate_model(model_from_checkpoint(ck), ck.policy, ws.heldout, cfg.decode_samples,
                                             cfg.decode);
    for (const auto& w : s.warnings) err << "flythinker: warning " << label << " " << w << "\n";
    csv += segment_table_rows(label, s);
  }
  csv += "# config_hash=" + ws.hash + "\n";
  const std::string path = cfg.path(cfg.paths.eval_csv);
  write_file(path, csv);
  out << csv << "eval_csv=" << path << "\n";
  return 0;
}

int cmd_bench(const Options& o, std::ostream& out, std::ostream&) {
  const RunConfig cfg = load(o);
  const Workspace ws = open_workspace(cfg);
  const FlyThinkerModel<float> model = o.checkpoint.empty() ? init_model(cfg) : model_from_checkpoint(checkpoint_for(o, cfg));
  std::vector<std::vector<TokenId>> prompts;
  for (std::size_t i = 0; i < cfg.bench.n_prompts; ++i) {
    const auto& s = ws.heldout[i % ws.heldout.size()];
    const std::size_t len = std::min(cfg.bench.prompt_len, s.prompt_len);
    prompts.emplace_back(s.tokens.begin(), s.tokens.begin() + static_cast<std::ptrdiff_t>(len));
  }
  DecodeConfig d = cfg.decode;
  d.max_steps = cfg.bench.max_steps;
  const BenchReport rep = bench(model, prompts, d, BenchOptions{cfg.bench.warmup, cfg.bench.micro_repeats});
  const std::string csv = bench_csv(rep, ws.hash);
  const std::string path = cfg.path(cfg.paths.bench_csv);
  write_file(path, csv);
  out << csv;
  for (const auto& [policy, us] : rep.per_token_us) out << "per_token_us " << policy << "=" << format_double(us) << "\n";
  out << "hardware_threads=" << rep.hardware_threads << " bench_csv=" << path << "\n";
  return 0;
}

int cmd_grad_check(const Options& o, std::ostream& out, std::ostream&) {
  const RunConfig cfg = load(o);
  bool ok = true;
  for (const auto& c : grad_check_suite(cfg.seed)) {
    const bool pass = c.report.max_rel_error <= 1e-3 && c.reasoner_grad_zero_at_lambda0;
    ok &= pass;
    out << "case=" << c.name << " checked=" << c.report.checked << " max_rel_error=" << format_double(c.report.max_rel_error)
        << " worst=" << c.report.worst_parameter << " reasoner_zero_at_lambda0=" << (c.reasoner_grad_zero_at_lambda0 ? 1 : 0)
        << " " << (pass ? "PASS" : "FAIL") << "\n";
  }
  return ok ? 0 : 1;
}

int cmd_dump_latents(const Options& o, std::ostream& out, std::ostream&) {
  const RunConfig cfg = load(o);
  const Workspace ws = open_workspace(cfg);
  const FlyThinkerModel<float> model = model_from_checkpoint(checkpoint_for(o, cfg));
  const std::size_t n = std::min(o.limit ? o.limit : cfg.decode_samples, ws.heldout.size());
  const std::vector<EncodedSample> samples(ws.heldout.begin(), ws.heldout.begin() + static_cast<std::ptrdiff_t>(n));
  const std::string path = cfg.path(cfg.paths.latents_csv);
  dump_latents(model, samples, path, ws.hash);
  out << "latents_csv=" << path << " samples=" << n << "\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"flythinker: think-while-generating experiments", "flythinker"};
  app.require_subcommand(1);
  Options o;
  auto add_config = [&](CLI::App* c) { c->add_option("--config", o.config, "run config (JSON)"); };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  add_config(gen);
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint plus metrics CSV");
  add_config(train);
  train->add_option("--policy", o.policy, "flythinker or sft");
  train->add_option("--steps", o.steps, "override train.steps");
  train->add_option("--resume", o.resume, "checkpoint to resume from");
  train->add_option("--checkpoint", o.checkpoint, "output checkpoint path");
  train->add_flag("--allow-config-mismatch", o.allow_mismatch, "resume even if the config hash differs");
  train->add_flag("--lambda-sweep", o.sweep, "train once per lambda in the sweep set");
  train->add_option("--sweep-steps", o.sweep_steps, "steps per lambda in the sweep");
  auto* decode = app.add_subcommand("decode", "decode held-out prompts into a transcript");
  add_config(decode);
  decode->add_option("--checkpoint", o.checkpoint);
  decode->add_option("--mode", o.mode, "staggered, sequential or sft");
  decode->add_option("--limit", o.limit, "number of prompts");
  auto* eval = app.add_subcommand("eval", "four-segment metric table for one or more checkpoints");
  add_config(eval);
  eval->add_option("--checkpoint", o.checkpoints)->required();
  eval->add_option("--label", o.labels);
  auto* bench_cmd = app.add_subcommand("bench", "latency benchmark, writes the bench CSV");
  add_config(bench_cmd);
  bench_cmd->add_option("--checkpoint", o.checkpoint);
  auto* grad = app.add_subcommand("grad-check", "finite-difference check of the joint gradients");
  add_config(grad);
  auto* dump = app.add_subcommand("dump-latents", "export Reasoner latents as CSV");
  add_config(dump);
  dump->add_option("--checkpoint", o.checkpoint);
  dump->add_option("--limit", o.limit, "number of samples");

  std::vector<const char*> argv{"flythinker"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return 0;
    report_error(err, "usage", e.what());
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(o, out, err);
    if (*train) return cmd_train(o, out, err);
    if (*decode) return cmd_decode(o, out, err);
    if (*eval) return cmd_eval(o, out, err);
    if (*bench_cmd) return cmd_bench(o, out, err);
    if (*grad) return cmd_grad_check(o, out, err);
    if (*dump) return cmd_dump_latents(o, out, err);
  } catch (const Error& e) {
    report_error(err, e.kind(), e.what());
    return e.kind() == "validation" || e.kind() == "config_mismatch" ? 3 : 1;
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what());
    return 1;
  }
  report_error(err, "usage", "no subcommand");
  return 2;
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace flythinker
