// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>

#include "flythinker/config.hpp"

namespace flythinker {
namespace {

TEST(RunConfigParse, DefaultsFromEmptyObject) {
  const auto c = parse_run_config("{}", false);
  EXPECT_EQ(c.generator.n_layers, 4u);
  EXPECT_EQ(c.generator.d_model, 128u);
  EXPECT_EQ(c.reasoner.n_layers, 2u);
  EXPECT_EQ(c.reasoner.d_model, 64u);
  EXPECT_EQ(c.fusion.lambda, 0.5);
  EXPECT_EQ(c.fusion.region, Region::global);
  EXPECT_EQ(c.corpus.n_users, 200u);
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfigParse, OverridesAndSeedPropagation) {
  const auto c = parse_run_config(
      R"({"seed": 9, "fusion": {"lambda": 1.5, "region": "output_only"}, "train": {"policy": "sft", "batch_size": 3},
          "decode": {"stop_token": null, "mode": "sample"}})",
      false);
  EXPECT_EQ(c.fusion.lambda, 1.5);
  EXPECT_EQ(c.fusion.region, Region::output_only);
  EXPECT_EQ(c.train.policy, Policy::sft);
  EXPECT_EQ(c.train.batch_size, 3u);
  EXPECT_EQ(c.corpus.seed, 9u);
  EXPECT_EQ(c.train.seed, 9u);
  EXPECT_FALSE(c.decode.stop_token.has_value());
  EXPECT_EQ(c.decode.mode, DecodeMode::sample);
}

TEST(RunConfigParse, StrictKeysAndTypes) {
  EXPECT_THROW(parse_run_config(R"({"sede": 1})", false), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"fusion": {"lamda": 1}})", false), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"seed": "one"})", false), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"train": {"batch_size": -2}})", false), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"fusion": {"region": "middle"}})", false), ConfigError);
  EXPECT_THROW(parse_run_config("{", false), ConfigError);
  EXPECT_THROW(parse_run_config("[]", false), ConfigError);
}

TEST(RunConfigParse, JsonRoundTrip) {
  const auto c = parse_run_config(R"({"seed": 4, "fusion": {"lambda": 0.2}, "bench": {"n_prompts": 3}})", false);
  const auto back = parse_run_config(run_config_json(c), false);
  EXPECT_EQ(run_config_json(back), run_config_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(RunConfigParse, OutputDirFromEnvironment) {
  ::setenv("FT_OUTPUT_DIR", "/tmp/ft-env-out", 1);
  EXPECT_EQ(parse_run_config(R"({"output_dir": "elsewhere"})").output_dir, "/tmp/ft-env-out");
  EXPECT_EQ(parse_run_config(R"({"output_dir": "elsewhere"})", false).output_dir, "elsewhere");
  ::unsetenv("FT_OUTPUT_DIR");
  EXPECT_EQ(parse_run_config(R"({"output_dir": "elsewhere"})").output_dir, "elsewhere");
}

TEST(RunConfig, PathsResolveAgainstOutputDir) {
  auto c = parse_run_config(R"({"output_dir": "/x/out"})", false);
  EXPECT_EQ(c.path("a.csv"), "/x/out/a.csv");
  EXPECT_EQ(c.path("/abs/b.csv"), "/abs/b.csv");
}

TEST(ConfigHash, InvariantToPathsAndBudget) {
  const auto base = parse_run_config("{}", false);
  const auto moved = parse_run_config(
      R"({"output_dir": "o2", "paths": {"checkpoint": "z.ftck"}, "train": {"steps": 7, "eval_every": 3}})", false);
  EXPECT_EQ(config_hash(base), config_hash(moved));
  EXPECT_NE(config_hash(base), config_hash(parse_run_config(R"({"seed": 2})", false)));
  EXPECT_NE(config_hash(base), config_hash(parse_run_config(R"({"fusion": {"lambda": 0.6}})", false)));
  EXPECT_EQ(config_hash(base).size(), 16u);
}

TEST(RunConfig, Validation) {
  EXPECT_THROW(parse_run_config(R"({"generator": {"vocab_size": 100}, "reasoner": {"vocab_size": 100}})", false).validate(),
               ConfigError);
  EXPECT_THROW(parse_run_config(R"({"reasoner": {"vocab_size": 600}})", false).validate(), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"fusion": {"lambda": -1}})", false).validate(), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"generator": {"n_heads": 3}})", false).validate(), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"train": {"learning_rate": 0}})", false).validate(), ConfigError);
}

}  // namespace
}  // namespace flythinker
