// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "flythinker/checkpoint.hpp"
#include "flythinker/io.hpp"
#include "unit/test_util.hpp"

namespace flythinker {
namespace {

using testing::tiny;

std::vector<EncodedSample> data(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<EncodedSample> out;
  for (int i = 0; i < 10; ++i) out.push_back(testing::random_sample(rng, 3, 5, 32));
  return out;
}

Trainer<float> make_trainer(Policy policy = Policy::flythinker) {
  TrainConfig c;
  c.policy = policy;
  c.batch_size = 2;
  c.learning_rate = 2e-3;
  c.seed = 5;
  return Trainer<float>(FlyThinkerModel<float>::init(tiny(1, 2, 16), tiny(1, 2, 8), {0.5, Region::input_only}, 5), c);
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    for (int i = 0; i < 3; ++i) trainer.step(train);
  }
  std::vector<EncodedSample> train = data(1);
  Trainer<float> trainer = make_trainer();
};

TEST_F(CheckpointTest, CaptureHoldsTrainingState) {
  const auto c = capture_checkpoint(trainer, 0xabcdefULL);
  EXPECT_EQ(c.step, 3u);
  EXPECT_EQ(c.adam_t, 3u);
  EXPECT_EQ(c.config_hash, 0xabcdefULL);
  EXPECT_EQ(c.fusion.region, Region::input_only);
  EXPECT_TRUE(c.tensors.count("generator/tok_emb"));
  EXPECT_TRUE(c.tensors.count("projection/weight"));
  EXPECT_TRUE(c.tensors.count("adam.m/reasoner/tok_emb"));
  EXPECT_TRUE(c.tensors.count("adam.v/generator/unembed.weight"));
}

TEST_F(CheckpointTest, SerializeParseRoundTrip) {
  const auto c = capture_checkpoint(trainer, 7);
  const auto bytes = serialize_checkpoint(c);
  const auto back = parse_checkpoint(bytes);
  EXPECT_EQ(back, c);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST_F(CheckpointTest, SaveLoadSaveIsByteIdentical) {
  const auto dir = testing::scratch("ckpt_bytes");
  save_checkpoint(dir + "/a.ftck", capture_checkpoint(trainer, 7));
  save_checkpoint(dir + "/b.ftck", load_checkpoint(dir + "/a.ftck"));
  EXPECT_EQ(read_file(dir + "/a.ftck"), read_file(dir + "/b.ftck"));
}

TEST_F(CheckpointTest, RestoredModelMatches) {
  const auto c = capture_checkpoint(trainer, 7);
  const auto m = model_from_checkpoint(c);
  for (const auto& name : m.generator.store.names())
    EXPECT_EQ(m.generator.store.value(name), trainer.model().generator.store.value(name));
  for (const auto& name : m.reasoner.store.names())
    EXPECT_EQ(m.reasoner.store.value(name), trainer.model().reasoner.store.value(name));
  EXPECT_EQ(m.projection->value(kProjectionWeight), trainer.model().projection->value(kProjectionWeight));
}

TEST_F(CheckpointTest, TruncationIsDetectedWithoutSideEffects) {
  const auto bytes = serialize_checkpoint(capture_checkpoint(trainer, 7));
  for (std::size_t cut : {std::size_t(0), std::size_t(5), std::size_t(20), bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(parse_checkpoint(std::string_view(bytes).substr(0, cut)), CorruptCheckpointError) << cut;
  }
  // a broken checkpoint must not touch a live trainer
  auto fresh = make_trainer();
  const auto before = serialize_checkpoint(capture_checkpoint(fresh, 7));
  auto bad = capture_checkpoint(trainer, 7);
  bad.tensors.erase("reasoner/tok_emb");
  EXPECT_THROW(restore_checkpoint(fresh, bad), CorruptCheckpointError);
  EXPECT_EQ(serialize_checkpoint(capture_checkpoint(fresh, 7)), before);
}

TEST_F(CheckpointTest, CorruptionAndVersion) {
  auto bytes = serialize_checkpoint(capture_checkpoint(trainer, 7));
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x40;
  EXPECT_THROW(parse_checkpoint(flipped), CorruptCheckpointError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint(magic), CorruptCheckpointError);
  auto version = bytes;
  version[8] = static_cast<char>(kCheckpointVersion + 1);
  EXPECT_THROW(parse_checkpoint(version), VersionMismatchError);
  EXPECT_THROW(load_checkpoint(testing::scratch("ckpt_missing") + "/none.ftck"), Error);
}

TEST_F(CheckpointTest, ModelConfigMismatch) {
  const auto c = capture_checkpoint(trainer, 7);
  EXPECT_NO_THROW(check_model_configs(c, tiny(1, 2, 16), tiny(1, 2, 8)));
  EXPECT_THROW(check_model_configs(c, tiny(2, 2, 16), tiny(1, 2, 8)), ConfigMismatchError);
  EXPECT_THROW(check_model_configs(c, tiny(1, 2, 16), tiny(1, 2, 16)), ConfigMismatchError);
}

TEST(CheckpointResume, SplitRunIsBitExact) {
  for (Policy policy : {Policy::flythinker, Policy::sft}) {
    const auto train = data(2);
    auto whole = make_trainer(policy);
    std::vector<double> losses;
    for (int i = 0; i < 10; ++i) losses.push_back(whole.step(train).train_loss);

    auto first = make_trainer(policy);
    for (int i = 0; i < 5; ++i) ASSERT_EQ(first.step(train).train_loss, losses[i]);
    const auto dir = testing::scratch("ckpt_resume");
    save_checkpoint(dir + "/mid.ftck", capture_checkpoint(first, 1));

    // a differently seeded trainer, fully overwritten by the restore
    TrainConfig other = whole.config();
    other.seed = 99;
    Trainer<float> second(FlyThinkerModel<float>::init(tiny(1, 2, 16), tiny(1, 2, 8), {0.5, Region::input_only}, 99),
                          other);
    restore_checkpoint(second, load_checkpoint(dir + "/mid.ftck"));
    EXPECT_EQ(second.steps_done(), 5u);
    for (int i = 5; i < 10; ++i) ASSERT_EQ(second.step(train).train_loss, losses[i]) << "step " << i;
    EXPECT_EQ(serialize_checkpoint(capture_checkpoint(second, 1)), serialize_checkpoint(capture_checkpoint(whole, 1)));
  }
}

TEST(ParseHash, HexRoundTrip) {
  EXPECT_EQ(parse_hash("00000000000000ff"), 255u);
  EXPECT_EQ(hex64(parse_hash("0123456789abcdef")), "0123456789abcdef");
  EXPECT_THROW(parse_hash(""), ConfigError);
  EXPECT_THROW(parse_hash("xyz"), ConfigError);
}

}  // namespace
}  // namespace flythinker
