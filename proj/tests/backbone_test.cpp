// Copyright 2026 The UMKD Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "umkd/checkpoint.hpp"

using namespace umkd;

namespace {

BackboneSpec toy_spec(std::vector<int> widths = {4, 6, 8, 10}, int classes = 3, int res = 16) {
  BackboneSpec s;
  s.name = "toy";
  s.stage_channels = std::move(widths);
  s.num_classes = classes;
  s.input_height = res;
  s.input_width = res;
  return s;
}

Tensor random_batch(int b, int res, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor::randn({b, 3, res, res}, rng);
}

}  // namespace

TEST(BackboneSpec, Validation) {
  EXPECT_NO_THROW(toy_spec().validate());
  EXPECT_THROW(toy_spec({}).validate(), ConfigError);
  EXPECT_THROW(toy_spec({4, 4, 4, 4}, 1).validate(), ConfigError);
  EXPECT_THROW(toy_spec({4, 4, 4, 4}, 3, 20).validate(), ConfigError);  // 20 not divisible by 8
}

TEST(Backbone, TapShapesFollowSpec) {
  Backbone m(toy_spec(), 1);
  auto taps = m.forward_with_taps(random_batch(2, 16, 5));
  EXPECT_EQ(taps.shallow.shape(), (Shape{2, 4, 8, 8}));
  EXPECT_EQ(taps.deep.shape(), (Shape{2, 10, 2, 2}));
  EXPECT_EQ(taps.logits_map.values().shape(), (Shape{2, 3, 2, 2}));
  EXPECT_EQ(taps.pooled_logits.shape(), (Shape{2, 3}));
}

TEST(Backbone, ZeroHeadGivesZeroLogits) {
  Backbone m(toy_spec(), 2);
  for (auto& v : m.head_weight().data()) v = 0.0;
  auto taps = m.forward_with_taps(random_batch(3, 16, 9));
  for (double v : taps.logits_map.values().values()) EXPECT_EQ(v, 0.0);
  for (double v : taps.pooled_logits.values()) EXPECT_EQ(v, 0.0);
}

TEST(Backbone, ForwardIsBitwiseDeterministic) {
  Backbone m(toy_spec(), 3);
  Tensor x = random_batch(2, 16, 11);
  NoGradGuard ng;
  auto a = m.forward_with_taps(x);
  auto b = m.forward_with_taps(x);
  EXPECT_EQ(a.shallow.values(), b.shallow.values());
  EXPECT_EQ(a.deep.values(), b.deep.values());
  EXPECT_EQ(a.logits_map.values().values(), b.logits_map.values().values());
  EXPECT_EQ(a.pooled_logits.values(), b.pooled_logits.values());
}

TEST(Backbone, RejectsWrongResolution) {
  Backbone m(toy_spec(), 3);
  EXPECT_THROW(m.forward_with_taps(random_batch(1, 24, 1)), InputError);
}

TEST(Backbone, PooledLogitsAreSpatialMeanOfLogitsMap) {
  // 100 random toy models of varying width.
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> widths;
    for (int s = 0; s < 4; ++s) widths.push_back(2 + static_cast<int>(rng() % 4));
    Backbone m(toy_spec(widths, 2 + static_cast<int>(rng() % 3)), rng());
    NoGradGuard ng;
    auto taps = m.forward_with_taps(random_batch(4, 16, rng()));
    const auto& L = taps.logits_map;
    const int hw = L.height() * L.width();
    for (int b = 0; b < L.batch(); ++b)
      for (int c = 0; c < L.class_count(); ++c) {
        double mean = 0.0;
        for (int i = 0; i < hw; ++i) mean += L.values()[(b * L.class_count() + c) * hw + i];
        mean /= hw;
        const double pooled = taps.pooled_logits[b * L.class_count() + c];
        EXPECT_LE(std::abs(pooled - mean), 1e-6 * std::max(1.0, std::abs(mean)));
      }
  }
}

TEST(LogitsMapFromFeatures, AffineConstantCase) {
  Tensor deep = Tensor::full({1, 1, 3, 3}, 1.0);
  auto L = logits_map_from_features(deep, Tensor({2, 1}, {2.0, -1.0}), Tensor({2}, {0.5, 0.0}));
  for (int i = 0; i < 9; ++i) {
    EXPECT_DOUBLE_EQ(L.values()[i], 2.5);
    EXPECT_DOUBLE_EQ(L.values()[9 + i], -1.0);
  }
}

TEST(LogitsMapFromFeatures, IdentityClassifierReturnsFeatures) {
  std::mt19937_64 rng(4);
  Tensor deep = Tensor::randn({2, 3, 2, 2}, rng);
  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto L = logits_map_from_features(deep, eye, Tensor::zeros({3}));
  EXPECT_EQ(L.values().values(), deep.values());
}

TEST(LogitsMapFromFeatures, MeanCommutesWithClassifier) {
  std::mt19937_64 rng(5);
  Tensor deep = Tensor::randn({3, 4, 3, 2}, rng);
  Tensor w = Tensor::randn({3, 4}, rng);
  Tensor b = Tensor::randn({3}, rng);
  auto L = logits_map_from_features(deep, w, b);
  Tensor lhs = ops::global_avg_pool(L.values());
  Tensor rhs = ops::linear(ops::global_avg_pool(deep), w, b);
  for (std::int64_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-6);
}

TEST(LogitsMapFromFeatures, DimensionMismatch) {
  EXPECT_THROW(logits_map_from_features(Tensor::zeros({1, 3, 2, 2}), Tensor::zeros({2, 4}), Tensor::zeros({2})),
               InputError);
}

TEST(Backbone, NonFiniteActivationsAreNumericErrors) {
  Backbone m(toy_spec(), 6);
  Tensor x = Tensor::full({1, 3, 16, 16}, std::numeric_limits<double>::quiet_NaN());
  EXPECT_THROW(m.forward_with_taps(x), NumericError);
}

TEST(Backbone, CloneIsIndependentAndHashesDiffer) {
  Backbone a(toy_spec(), 8);
  Backbone b = a.clone();
  EXPECT_EQ(a.weight_hash(), b.weight_hash());
  b.head_bias().data()[0] += 1.0;
  EXPECT_NE(a.weight_hash(), b.weight_hash());
  Backbone c(toy_spec(), 9);
  EXPECT_NE(a.weight_hash(), c.weight_hash());
}

TEST(Checkpoint, RoundTripPreservesWeightsAndSpec) {
  const auto path = std::filesystem::temp_directory_path() / "umkd_backbone_test.ckpt";
  Backbone a(toy_spec(), 10);
  save_backbone(path, a, {{"role", "expert"}});
  Backbone b = load_backbone(path);
  EXPECT_EQ(a.weight_hash(), b.weight_hash());
  EXPECT_EQ(b.spec().stage_channels, a.spec().stage_channels);
  auto meta = read_checkpoint(path).metadata;
  EXPECT_EQ(meta["extra"]["role"], "expert");
  EXPECT_EQ(meta["backbone"]["num_classes"], 3);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsForeignFiles) {
  const auto path = std::filesystem::temp_directory_path() / "umkd_not_a_ckpt.bin";
  std::ofstream(path) << "hello world, definitely not a checkpoint";
  EXPECT_THROW(read_checkpoint(path), IngestionError);
  std::filesystem::remove(path);
}
