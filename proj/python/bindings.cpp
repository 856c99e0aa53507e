// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "flythinker/cli.hpp"
#include "flythinker/io.hpp"

namespace py = pybind11;
namespace ft = flythinker;

namespace {

py::dict scores_dict(const ft::MetricScores& s) {
  py::dict d;
  d["rouge1"] = s.rouge1;
  d["rougeL"] = s.rougeL;
  d["bleu"] = s.bleu;
  return d;
}

// A checkpoint loaded for inference.
class Model {
 public:
  explicit Model(const std::string& path) : ckpt_(ft::load_checkpoint(path)), model_(ft::model_from_checkpoint(ckpt_)) {}

  std::vector<ft::TokenId> decode(const std::vector<ft::TokenId>& prompt, const std::string& mode, std::size_t max_steps,
                                  bool sample, double temperature, std::uint64_t seed) const {
    ft::DecodeConfig cfg;
    cfg.max_steps = max_steps;
    cfg.mode = sample ? ft::DecodeMode::sample : ft::DecodeMode::greedy;
    cfg.temperature = temperature;
    cfg.seed = seed;
    py::gil_scoped_release release;
    if (mode == "staggered") return ft::decode_staggered(model_, prompt, cfg).tokens;
    if (mode == "sequential") return ft::decode_sequential(model_, prompt, cfg).tokens;
    if (mode == "sft") return ft::decode_baseline_sft(model_.generator, prompt, cfg).tokens;
    throw ft::ConfigError("unknown decode mode '" + mode + "' (expected staggered, sequential or sft)");
  }

  std::vector<std::vector<float>> reason_all(const std::vector<ft::TokenId>& tokens) const {
    const auto lat = ft::reason_all(model_, tokens);
    std::vector<std::vector<float>> out;
    for (std::size_t i = 0; i < lat.vectors.rows(); ++i) {
      const auto r = lat.vectors.row(i);
      out.emplace_back(r.begin(), r.end());
    }
    return out;
  }

  std::string policy() const { return ft::to_string(ckpt_.policy); }
  double lambda() const { return model_.fusion.lambda; }
  std::uint64_t step() const { return ckpt_.step; }
  std::string config_hash() const { return ft::hex64(ckpt_.config_hash); }

 private:
  ft::Checkpoint ckpt_;
  ft::FlyThinkerModel<float> model_;
};

}  // namespace

PYBIND11_MODULE(_flythinker, m) {
  m.doc() = "flythinker native core";

  auto base = py::register_exception<ft::Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ft::ConfigError>(m, "ConfigError", base.ptr());

  m.def("rouge1", [](const ft::Tokens& c, const ft::Tokens& r) { return ft::rouge1(c, r); });
  m.def("rougeL", [](const ft::Tokens& c, const ft::Tokens& r) { return ft::rougeL(c, r); });
  m.def("bleu", [](const ft::Tokens& c, const ft::Tokens& r, std::size_t max_n) { return ft::bleu(c, r, max_n); },
        py::arg("candidate"), py::arg("reference"), py::arg("max_n") = 4);
  m.def(
      "segment_eval",
      [](const std::vector<std::pair<ft::Tokens, ft::Tokens>>& pairs, std::size_t k) {
        const auto s = ft::segment_eval(pairs, k);
        py::dict d;
        py::list segs;
        for (const auto& x : s.segments) segs.append(scores_dict(x));
        d["segments"] = segs;
        d["overall"] = scores_dict(s.overall);
        d["warnings"] = s.warnings;
        return d;
      },
      py::arg("pairs"), py::arg("k") = 4);

  m.def("vocabulary", [] { return ft::Vocabulary::standard().words(); });
  m.def(
      "generate_corpus_jsonl",
      [](const std::string& config_json) {
        const auto cfg = ft::parse_run_config(config_json, false);
        return ft::dataset_jsonl(ft::generate_corpus(cfg.corpus).samples);
      },
      py::arg("config_json") = "{}");
  m.def(
      "config_hash", [](const std::string& config_json) { return ft::config_hash(ft::parse_run_config(config_json, false)); },
      py::arg("config_json") = "{}");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = ft::run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      "Runs a flythinker subcommand in-process; returns (exit_code, stdout, stderr).");

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def("decode", &Model::decode, py::arg("prompt"), py::arg("mode") = "staggered", py::arg("max_steps") = 128,
           py::arg("sample") = false, py::arg("temperature") = 1.0, py::arg("seed") = 0)
      .def("reason_all", &Model::reason_all, py::arg("tokens"))
      .def_property_readonly("policy", &Model::policy)
      .def_property_readonly("fusion_lambda", &Model::lambda)
      .def_property_readonly("step", &Model::step)
      .def_property_readonly("config_hash", &Model::config_hash);
}
