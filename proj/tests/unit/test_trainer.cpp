// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "flythinker/io.hpp"
#include "flythinker/trainer.hpp"
#include "unit/test_util.hpp"

namespace flythinker {
namespace {

using testing::pointers;
using testing::random_sample;
using testing::tiny;

std::vector<EncodedSample> samples(std::uint64_t seed, std::size_t n, std::size_t vocab = 32) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> p(2, 6), r(2, 8);
  std::vector<EncodedSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_sample(rng, p(rng), r(rng), vocab));
  return out;
}

TrainConfig small_train(Policy policy) {
  TrainConfig c;
  c.policy = policy;
  c.batch_size = 3;
  c.learning_rate = 3e-3;
  c.eval_every = 5;
  c.heldout_eval_samples = 6;
  c.seed = 12;
  return c;
}

FlyThinkerModel<float> small_model(double lambda, std::size_t d_r = 8) {
  return FlyThinkerModel<float>::init(tiny(1, 2, 16), tiny(1, 2, d_r), {lambda, Region::global}, 12);
}

TEST(MakeBatch, RightPadsAndMasksResponse) {
  std::vector<EncodedSample> s(2);
  s[0].tokens = {1, 2, 3, 4, 5};
  s[0].prompt_len = 2;
  s[1].tokens = {6, 7, 8};
  s[1].prompt_len = 1;
  const auto b = make_batch(pointers(s));
  EXPECT_EQ(b.seq_len, 5u);
  EXPECT_EQ(b.tokens, (std::vector<TokenId>{1, 2, 3, 4, 5, 6, 7, 8, kPadToken, kPadToken}));
  // row i predicts token i+1; only rows whose target is a response token count
  EXPECT_EQ(b.loss_mask, (std::vector<std::uint8_t>{0, 1, 1, 1, 0, 1, 1, 0, 0, 0}));
  EXPECT_EQ(b.targets[1], 3);
  EXPECT_EQ(b.targets[6], 8);
  EXPECT_EQ(b.real_tokens, 8u);
  const auto src = batch_enhancement_sources(b, Region::global);
  EXPECT_EQ(src, (std::vector<std::int64_t>{-1, 0, 1, 2, 3, -1, 5, 6, -1, -1}));
}

TEST(MakeBatch, Errors) {
  std::vector<const EncodedSample*> none;
  EXPECT_THROW(make_batch(none), BatchError);
  std::vector<EncodedSample> s(1);
  s[0].tokens = {1, 2, 3};
  s[0].prompt_len = 3;
  EXPECT_THROW(make_batch(pointers(s)), BatchError);
}

TEST(ComputeLoss, UniformLogits) {
  Tensor<float> logits({4, 64}, 1.5f);
  const TokenId tg[] = {3, 9, 27, 63};
  const std::uint8_t mk[] = {0, 1, 1, 1};
  EXPECT_NEAR(compute_loss(logits, tg, mk), std::log(64.0), 1e-5);
}

TEST(ComputeLoss, PromptTargetsIgnored) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  Tensor<double> logits({3, 5});
  for (auto& v : logits.values()) v = n(rng);
  const std::uint8_t mk[] = {0, 1, 1};
  const TokenId a[] = {0, 2, 4};
  const TokenId b[] = {3, 2, 4};
  EXPECT_EQ(compute_loss(logits, a, mk), compute_loss(logits, b, mk));
}

TEST(ComputeLoss, TwoPositionsByHand) {
  const auto logits = Tensor<double>::matrix({{1, 2, 3}, {0, 0, 4}});
  const TokenId tg[] = {0, 2};
  const std::uint8_t mk[] = {1, 1};
  const double l0 = -std::log(std::exp(1.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  const double l1 = -std::log(std::exp(4.0) / (2.0 + std::exp(4.0)));
  EXPECT_NEAR(compute_loss(logits, tg, mk), (l0 + l1) / 2, 1e-12);
}

TEST(JointLoss, PaddingIsExcluded) {
  auto m = small_model(0.5);
  std::vector<EncodedSample> s = samples(3, 2);
  s[0].tokens.resize(5);
  s[0].prompt_len = 2;
  s[1].tokens.resize(9);
  s[1].prompt_len = 3;
  auto loss_of = [&](std::vector<const EncodedSample*> ptrs) {
    Tape<float> t(false);
    return double(t.value(joint_loss(t, m, make_batch(ptrs), Policy::flythinker))[0]);
  };
  const double both = loss_of({&s[0], &s[1]});
  const double a = loss_of({&s[0]}), b = loss_of({&s[1]});
  EXPECT_NEAR(both, (3 * a + 6 * b) / 9, 1e-5);
}

TEST(JointLoss, ReasonerReceivesGradient) {
  auto m = small_model(0.5);
  const auto s = samples(4, 4);
  Tape<float> t;
  t.backward(joint_loss(t, m, make_batch(pointers(s)), Policy::flythinker));
  double mx = 0;
  for (const auto& [name, e] : m.reasoner.store)
    for (float g : e.grad.values()) mx = std::max(mx, double(std::abs(g)));
  EXPECT_GT(mx, 0.0);
}

TEST(JointLoss, InputOnlyGradientFlowsThroughPromptLatentsOnly) {
  auto m = FlyThinkerModel<double>::init(tiny(1, 2, 8, 16, 16), tiny(1, 2, 8, 16, 16), {0.5, Region::input_only}, 2);
  std::mt19937_64 rng(6);
  std::vector<EncodedSample> s{random_sample(rng, 5, 4, 16), random_sample(rng, 3, 6, 16)};
  const Batch b = make_batch(pointers(s));
  auto reasoner_grad_max = [&](Region region, bool drop_prompt) {
    m.fusion.region = region;
    std::vector<std::uint8_t> keep(b.tokens.size(), 1);
    if (drop_prompt) {
      for (std::size_t r = 0; r < b.batch_size; ++r)
        for (std::size_t i = 0; i + 1 < b.prompt_lens[r]; ++i) keep[r * b.seq_len + i] = 0;
    }
    Tape<double> t;
    t.backward(joint_loss(t, m, b, Policy::flythinker, &keep));
    double mx = 0;
    for (const auto& [name, e] : m.reasoner.store)
      for (double g : e.grad.values()) mx = std::max(mx, std::abs(g));
    return mx;
  };
  EXPECT_GT(reasoner_grad_max(Region::input_only, false), 0.0);
  EXPECT_EQ(reasoner_grad_max(Region::input_only, true), 0.0);
  EXPECT_GT(reasoner_grad_max(Region::output_only, true), 0.0);
}

TEST(GradCheck, TinyJointModels) {
  for (std::size_t dr : {8u, 4u}) {
    auto m = FlyThinkerModel<double>::init(tiny(1, 2, 8, 16, 16), tiny(1, 2, dr, 16, 16), {0.5, Region::global}, 5);
    std::mt19937_64 rng(7);
    std::vector<EncodedSample> s{random_sample(rng, 3, 4, 16), random_sample(rng, 2, 3, 16)};
    const auto rep = grad_check_joint(m, pointers(s));
    EXPECT_LE(rep.max_rel_error, 1e-3) << rep.worst_parameter;
    std::size_t total = m.generator.parameter_count() + m.reasoner.parameter_count();
    if (m.projection) total += m.projection->parameter_count();
    EXPECT_EQ(rep.checked, total);
  }
}

TEST(GradCheck, LambdaZeroLeavesReasonerUntouched) {
  auto m = FlyThinkerModel<double>::init(tiny(1, 2, 8, 16, 16), tiny(1, 2, 4, 16, 16), {0.0, Region::global}, 5);
  std::mt19937_64 rng(8);
  std::vector<EncodedSample> s{random_sample(rng, 3, 5, 16)};
  Tape<double> t;
  t.backward(joint_loss(t, m, make_batch(pointers(s)), Policy::flythinker));
  for (const auto& [name, e] : m.reasoner.store)
    for (double g : e.grad.values()) ASSERT_EQ(g, 0.0) << name;
  for (const auto& [name, e] : *m.projection)
    for (double g : e.grad.values()) ASSERT_EQ(g, 0.0) << name;
}

TEST(TrainStep, TwoForwardsIndependentOfLength) {
  for (std::size_t T : {4u, 16u, 64u}) {
    auto m = FlyThinkerModel<float>::init(tiny(1, 2, 16, 32, 96), tiny(1, 2, 8, 32, 96), {0.5, Region::global}, 1);
    std::mt19937_64 rng(T);
    std::vector<EncodedSample> s{random_sample(rng, 6, T, 32), random_sample(rng, 4, T, 32)};
    TrainConfig cfg = small_train(Policy::flythinker);
    AdamOptimizer<float> opt(cfg);
    EXPECT_EQ(train_step(m, opt, pointers(s), cfg).forwards_per_step, 2u) << "T=" << T;
    cfg.policy = Policy::sft;
    EXPECT_EQ(train_step(m, opt, pointers(s), cfg).forwards_per_step, 1u) << "T=" << T;
  }
}

TEST(TrainStep, AdamUpdateMatchesDirectFormula) {
  auto m = small_model(0.5);
  const auto s = samples(9, 3);
  TrainConfig cfg = small_train(Policy::flythinker);
  cfg.grad_clip_norm = 0.05;  // force the clip branch
  auto expect = m;
  Tape<float> t;
  t.backward(joint_loss(t, expect, make_batch(pointers(s)), Policy::flythinker));
  double sq = 0;
  for (auto& [g, store] : parameter_groups(expect))
    for (const auto& [n, e] : *store)
      for (float v : e.grad.values()) sq += double(v) * v;
  const double norm = std::sqrt(sq);
  ASSERT_GT(norm, cfg.grad_clip_norm);
  const double clip = cfg.grad_clip_norm / (norm + 1e-6);

  AdamOptimizer<float> opt(cfg);
  train_step(m, opt, pointers(s), cfg);
  auto groups_after = parameter_groups(m);
  auto groups_before = parameter_groups(expect);
  for (std::size_t k = 0; k < groups_after.size(); ++k) {
    for (const auto& [name, e] : *groups_before[k].second) {
      const auto& after = groups_after[k].second->value(name);
      for (std::size_t i = 0; i < e.value.size(); ++i) {
        // first step: m_hat = g, v_hat = g^2
        const double g = double(e.grad[i]) * clip;
        const double want = double(e.value[i]) - cfg.learning_rate * g / (std::abs(g) + cfg.eps);
        ASSERT_NEAR(after[i], want, 1e-6) << groups_after[k].first << "/" << name << "[" << i << "]";
      }
    }
  }
}

TEST(Trainer, LambdaZeroMatchesSftBitExactly) {
  const auto train = samples(10, 12);
  Trainer<float> fly(small_model(0.0), small_train(Policy::flythinker));
  Trainer<float> sft(small_model(0.0), small_train(Policy::sft));
  for (int i = 0; i < 15; ++i) {
    const auto a = fly.step(train);
    const auto b = sft.step(train);
    ASSERT_EQ(a.train_loss, b.train_loss) << "step " << i;
  }
  for (const auto& name : fly.model().generator.store.names()) {
    EXPECT_EQ(fly.model().generator.store.value(name), sft.model().generator.store.value(name)) << name;
  }
}

TEST(Trainer, SameSeedSameTrajectory) {
  const auto train = samples(11, 10);
  Trainer<float> a(small_model(0.5, 16), small_train(Policy::flythinker));
  Trainer<float> b(small_model(0.5, 16), small_train(Policy::flythinker));
  for (int i = 0; i < 8; ++i) ASSERT_EQ(a.step(train).train_loss, b.step(train).train_loss);
  EXPECT_EQ(a.rng_state(), b.rng_state());
}

TEST(Trainer, RunTrainingRowsAndProgress) {
  const auto train = samples(12, 16);
  const auto held = samples(13, 6);
  Trainer<float> tr(small_model(0.5), small_train(Policy::flythinker));
  const auto rows = run_training(tr, train, held, 40);
  ASSERT_EQ(rows.size(), 40u / 5 + 1);
  EXPECT_EQ(rows.front().step, 0u);
  EXPECT_EQ(rows.back().step, 40u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.forwards_per_step, 2u);
    EXPECT_TRUE(std::isfinite(r.heldout_loss));
  }
  EXPECT_LT(rows.back().heldout_loss, rows.front().heldout_loss);

  const std::string dir = testing::scratch("trainer_csv");
  write_metrics_csv(dir + "/m.csv", rows, "abc");
  const auto lines = split(read_file(dir + "/m.csv"), '\n');
  EXPECT_EQ(lines.front(), kMetricsCsvHeader);
  std::size_t data = 0;
  for (const auto& l : lines) data += !l.empty() && l[0] != '#' && l != kMetricsCsvHeader;
  EXPECT_EQ(data, rows.size());
  EXPECT_NE(read_file(dir + "/m.csv").find("# config_hash=abc"), std::string::npos);
}

TEST(Trainer, RngStateRoundTrip) {
  const auto train = samples(14, 10);
  Trainer<float> a(small_model(0.5), small_train(Policy::flythinker));
  a.step(train);
  Trainer<float> b(small_model(0.5), small_train(Policy::flythinker));
  b.set_rng_state(a.rng_state());
  EXPECT_EQ(a.rng_state(), b.rng_state());
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.learning_rate = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(policy_from_string("sft"), Policy::sft);
  EXPECT_THROW(policy_from_string("cot"), ConfigError);
}

}  // namespace
}  // namespace flythinker
