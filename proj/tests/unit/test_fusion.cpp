// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "flythinker/fusion.hpp"
#include "flythinker/trainer.hpp"
#include "unit/test_util.hpp"

namespace flythinker {
namespace {

using testing::random_tokens;
using testing::tiny;

FlyThinkerModel<float> matched(double lambda = 0.5, Region region = Region::global) {
  return FlyThinkerModel<float>::init(tiny(2, 2, 16), tiny(1, 2, 16), {lambda, region}, 3);
}

FlyThinkerModel<float> bridged(double lambda = 0.5) {
  return FlyThinkerModel<float>::init(tiny(2, 2, 16), tiny(1, 2, 8), {lambda, Region::global}, 3);
}

TEST(ReasonAll, CountAndSources) {
  auto m = matched();
  std::mt19937_64 rng(1);
  auto tok = random_tokens(rng, 10, 32);
  auto lat = reason_all(m, tok);
  EXPECT_EQ(lat.vectors.rows(), 9u);
  EXPECT_EQ(lat.vectors.cols(), 16u);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(lat.source_positions[i], i);
}

TEST(ReasonAll, OneReasonerPassRegardlessOfLength) {
  auto m = matched();
  std::mt19937_64 rng(2);
  for (std::size_t n : {2u, 9u, 40u}) {
    const auto before = m.reasoner.counters.full_passes;
    reason_all(m, random_tokens(rng, n, 32));
    EXPECT_EQ(m.reasoner.counters.full_passes, before + 1);
  }
}

TEST(ReasonAll, PrefixProperty) {
  auto m = bridged();
  std::mt19937_64 rng(3);
  auto tok = random_tokens(rng, 20, 32);
  const auto full = reason_all(m, tok);
  for (std::size_t j = 1; j < 19; ++j) {
    const std::vector<TokenId> pre(tok.begin(), tok.begin() + static_cast<std::ptrdiff_t>(j + 2));
    const auto part = reason_all(m, pre);
    EXPECT_LE(max_abs_diff(part.vectors, full.vectors.slice_rows(0, j + 1)), 1e-5);
  }
}

TEST(ReasonAll, TooShortOrTooLong) {
  auto m = matched();
  const std::vector<TokenId> one{1};
  EXPECT_THROW(reason_all(m, one), DimensionError);
  std::mt19937_64 rng(4);
  EXPECT_THROW(reason_all(m, random_tokens(rng, 65, 32)), LengthError);
}

TEST(ReasonStep, ReproducesReasonAll) {
  for (bool bridge : {false, true}) {
    auto m = bridge ? bridged() : matched();
    std::mt19937_64 rng(5);
    auto tok = random_tokens(rng, 30, 32);
    const auto all = reason_all(m, tok);
    DecodeCache<float> cache(m.reasoner.config);
    for (std::size_t i = 0; i + 1 < tok.size(); ++i) {
      auto r = reason_step(m.reasoner, m.projection_store(), cache, tok[i]);
      ASSERT_LE(max_abs_diff(r, all.vectors.slice_rows(i, i + 1)), 1e-5) << "position " << i;
    }
  }
}

TEST(ReasonStep, FirstTokenAndDeterminism) {
  auto m = bridged();
  const std::vector<TokenId> tok{7, 3};
  const auto all = reason_all(m, tok);
  DecodeCache<float> c1(m.reasoner.config), c2(m.reasoner.config);
  auto a = reason_step(m.reasoner, m.projection_store(), c1, 7);
  auto b = reason_step(m.reasoner, m.projection_store(), c2, 7);
  EXPECT_LE(max_abs_diff(a, all.vectors.slice_rows(0, 1)), 1e-5);
  EXPECT_EQ(a, b);
}

LatentThoughts<float> constant_latents(std::size_t n, std::size_t d) {
  LatentThoughts<float> l;
  l.vectors = Tensor<float>({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) l.vectors.at(i, j) = float(100 * (i + 1) + j);
  for (std::size_t i = 0; i < n; ++i) l.source_positions.push_back(i);
  return l;
}

Tensor<float> ramp(std::size_t n, std::size_t d) {
  Tensor<float> e({n, d});
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = 0.5f * float(i);
  return e;
}

TEST(Fuse, LambdaZeroIsIdentity) {
  const auto e = ramp(5, 3);
  EXPECT_EQ(fuse(e, constant_latents(4, 3), {0.0, Region::global}, {2, 3}), e);
}

TEST(Fuse, HandAdditionGlobal) {
  const auto e = ramp(3, 2);
  const auto lat = constant_latents(2, 2);
  const auto out = fuse(e, lat, {1.0, Region::global}, {1, 2});
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_EQ(out.at(0, j), e.at(0, j));
    EXPECT_EQ(out.at(1, j), e.at(1, j) + lat.vectors.at(0, j));
    EXPECT_EQ(out.at(2, j), e.at(2, j) + lat.vectors.at(1, j));
  }
}

TEST(Fuse, RegionMasks) {
  const std::size_t P = 4, N = 6;
  const auto e = ramp(N, 2);
  const auto lat = constant_latents(N - 1, 2);
  struct Expect {
    Region region;
    std::vector<bool> enhanced;
  };
  const std::vector<Expect> cases{
      {Region::global, {false, true, true, true, true, true}},
      {Region::input_only, {false, true, true, true, false, false}},
      {Region::output_only, {false, false, false, false, true, true}},
  };
  for (const auto& c : cases) {
    const auto out = fuse(e, lat, {1.0, c.region}, {P, N - P});
    for (std::size_t i = 0; i < N; ++i) {
      EXPECT_EQ(is_enhanced(i, P, c.region), c.enhanced[i]);
      const float expect = c.enhanced[i] ? e.at(i, 0) + lat.vectors.at(i - 1, 0) : e.at(i, 0);
      EXPECT_EQ(out.at(i, 0), expect) << to_string(c.region) << " row " << i;
    }
  }
}

TEST(Fuse, LinearInLambda) {
  const auto e = ramp(6, 4);
  const auto lat = constant_latents(5, 4);
  const auto a = fuse(e, lat, {0.3, Region::global}, {2, 4});
  const auto b = fuse(e, lat, {0.9, Region::global}, {2, 4});
  const auto ab = fuse(e, lat, {1.2, Region::global}, {2, 4});
  for (std::size_t i = 0; i < e.size(); ++i) {
    EXPECT_NEAR(ab[i] - e[i], (a[i] - e[i]) + (b[i] - e[i]), 1e-3);
  }
}

TEST(Fuse, WidthMismatch) {
  EXPECT_THROW(fuse(ramp(3, 4), constant_latents(2, 3), {1.0, Region::global}, {1, 2}), FusionWidthError);
}

TEST(Projection, PresentIffWidthsDiffer) {
  EXPECT_FALSE(matched().projection.has_value());
  auto b = bridged();
  ASSERT_TRUE(b.projection.has_value());
  EXPECT_EQ(b.projection->value(kProjectionWeight).shape(), (Shape{8, 16}));
  b.projection.reset();
  EXPECT_THROW(b.validate(), ConfigError);
}

TEST(Projection, IdentityAndZero) {
  Tensor<float> r({3, 4});
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = float(i) - 5.0f;
  Tensor<float> I({4, 4});
  for (std::size_t i = 0; i < 4; ++i) I.at(i, i) = 1;
  EXPECT_EQ(project_latent(r, I), r);
  EXPECT_THROW(project_latent(r, Tensor<float>({3, 4})), DimensionError);

  auto m = bridged(0.7);
  std::mt19937_64 rng(8);
  auto tok = random_tokens(rng, 12, 32);
  m.projection->value(kProjectionWeight).fill(0.0f);
  EXPECT_EQ(pipeline_logits(m, tok, 5), forward_logits(m.generator, tok));
}

TEST(Projection, GradientMatchesFiniteDifferences) {
  auto m = FlyThinkerModel<double>::init(tiny(1, 2, 8, 16, 16), tiny(1, 2, 4, 16, 16), {0.5, Region::global}, 4);
  std::mt19937_64 rng(9);
  std::vector<EncodedSample> s{testing::random_sample(rng, 3, 4, 16)};
  const auto ptrs = testing::pointers(s);
  const auto rep = grad_check_joint(m, ptrs);
  ASSERT_TRUE(rep.max_rel_error_by_group.count("projection"));
  EXPECT_LE(rep.max_rel_error_by_group.at("projection"), 1e-3);
}

TEST(Pipeline, LambdaZeroEqualsGenerator) {
  auto m = bridged(0.0);
  std::mt19937_64 rng(10);
  for (int i = 0; i < 5; ++i) {
    auto tok = random_tokens(rng, 20, 32);
    EXPECT_EQ(pipeline_logits(m, tok, 7), forward_logits(m.generator, tok));
  }
}

// Generator logits at i may depend on tokens 0..i only, through both the
// Generator's own attention and the lagged latents.
TEST(Pipeline, SystemCausality) {
  for (Region region : {Region::global, Region::input_only, Region::output_only}) {
    auto m = bridged(1.0);
    m.fusion.region = region;
    std::mt19937_64 rng(11);
    auto tok = random_tokens(rng, 16, 32);
    const auto base = pipeline_logits(m, tok, 6);
    for (std::size_t j = 1; j < tok.size(); ++j) {
      auto alt = tok;
      alt[j] = (alt[j] + 1) % 32;
      const auto out = pipeline_logits(m, alt, 6);
      ASSERT_EQ(out.slice_rows(0, j), base.slice_rows(0, j)) << to_string(region) << " perturb " << j;
    }
  }
}

TEST(Region, Parse) {
  for (Region r : {Region::global, Region::input_only, Region::output_only}) EXPECT_EQ(region_from_string(to_string(r)), r);
  EXPECT_THROW(region_from_string("everywhere"), ConfigError);
  EXPECT_EQ(FusionConfig{}.region, Region::global);
  EXPECT_EQ(FusionConfig{}.lambda, 0.5);
}

TEST(GroupSeed, DistinctPerGroup) {
  EXPECT_NE(group_seed(1, "generator"), group_seed(1, "reasoner"));
  EXPECT_NE(group_seed(1, "generator"), group_seed(2, "generator"));
  EXPECT_EQ(group_seed(1, "generator"), group_seed(1, "generator"));
}

}  // namespace
}  // namespace flythinker
