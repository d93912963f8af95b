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

#include <cmath>
#include <limits>

#include "umkd/trainer.hpp"

using namespace umkd;

namespace {

Tensor scalar(double v) { return Tensor({1}, {v}); }

DatasetSplits small_data(std::vector<int> counts, double noise, std::uint64_t seed) {
  SynthSpec s;
  s.num_classes = static_cast<int>(counts.size());
  s.counts = std::move(counts);
  s.height = 16;
  s.width = 16;
  s.noise_level = noise;
  s.seed = seed;
  return split(synth_grading_dataset(s), SplitConfig{{0.7, 0.15, 0.15}, seed});
}

BackboneSpec spec(const std::string& name, std::vector<int> widths, int classes) {
  BackboneSpec s{name, std::move(widths), classes};
  s.input_height = 16;
  s.input_width = 16;
  return s;
}

TrainConfig quick_train(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.optimizer.kind = OptimizerKind::adam;
  c.optimizer.lr = 1e-2;
  c.optimizer.weight_decay = 0.0;
  c.augment = false;
  return c;
}

}  // namespace

TEST(TotalLoss, WeightedSum) {
  LossWeights w{0.5, 0.25, {}};
  auto b = total_loss(scalar(1), scalar(2), scalar(3), scalar(4), w);
  EXPECT_DOUBLE_EQ(b.total_value, 4.5);
  EXPECT_EQ(b.sfa, 2.0);
  EXPECT_EQ(b.udd, 4.0);

  LossWeights zero{0.0, 0.0, {}};
  EXPECT_EQ(total_loss(scalar(1.25), scalar(2), scalar(3), scalar(4), zero).total_value, 1.25);

  LossWeights no_udd{1.0, 1.0, {true, true, false}};
  auto n = total_loss(scalar(1), scalar(2), scalar(3), scalar(4), no_udd);
  EXPECT_EQ(n.total_value, 6.0);
  EXPECT_EQ(n.udd, 0.0);
}

TEST(TotalLoss, NonFiniteComponentIsNamed) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  try {
    total_loss(scalar(1), scalar(2), scalar(nan), scalar(4), {});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("CFA"), std::string::npos) << e.what();
  }
  EXPECT_THROW(total_loss(scalar(1), scalar(-1), scalar(0), scalar(0), {}), NumericError);
}

TEST(EpochBatches, CoversEverySampleAndDropsSingletons) {
  std::mt19937_64 rng(1);
  auto b = detail::epoch_batches(33, 8, rng);
  ASSERT_EQ(b.size(), 4u);  // 8+8+8+8, the 33rd sample is dropped this epoch
  std::set<std::size_t> seen;
  for (const auto& batch : b)
    for (auto i : batch) EXPECT_TRUE(seen.insert(i).second);
  EXPECT_EQ(seen.size(), 32u);
  EXPECT_EQ(detail::epoch_batches(34, 8, rng).size(), 5u);
}

TEST(DistillConfig, Validation) {
  DistillConfig c;
  c.train.batch_size = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DistillConfig{};
  c.weights.alpha = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DistillConfig{};
  c.scales = ScaleSet{{3}};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainExpert, LearnsSeparableClasses) {
  auto data = small_data({60, 60}, 0.0, 3);
  auto e = train_expert("e", spec("e", {4, 8, 8}, 2), data, quick_train(15), 11);
  EXPECT_GE(e.record.test.oa, 0.95) << metrics_to_json(e.record.test).dump();
  EXPECT_FALSE(e.model.parameters()[0].tensor.requires_grad());
  EXPECT_EQ(e.hash, e.model.weight_hash());
  EXPECT_EQ(e.record.epochs.size(), 15u);
}

TEST(DistillLosses, StudentIdenticalToExpertHasNoDiscrepancy) {
  auto data = small_data({6, 6}, 1.0, 4);
  ExpertBundle e{"e", Backbone(spec("e", {4, 6, 8}, 2), 5), Normalizer::fit(data.train)};
  e.model.set_trainable(false);
  e.hash = e.model.weight_hash();
  Backbone student = e.model.clone();

  DistillConfig cfg;
  cfg.train.augment = false;
  auto modules = make_distill_modules({e}, student.spec(), cfg);
  std::vector<Sample> samples(data.train.samples.begin(), data.train.samples.begin() + 4);
  auto b = distill_losses({e}, student, modules, samples, e.normalizer, 16, 16, cfg);
  EXPECT_NEAR(b.udd, 0.0, 1e-20);
  EXPECT_GT(b.sfa, 0.0);  // projectors start random

  cfg.method = Method::kd;
  EXPECT_NEAR(distill_losses({e}, student, {}, samples, e.normalizer, 16, 16, cfg).kd, 0.0, 1e-12);
  cfg.method = Method::dkd;
  EXPECT_NEAR(distill_losses({e}, student, {}, samples, e.normalizer, 16, 16, cfg).kd, 0.0, 1e-12);
}

TEST(DistillLosses, CfaAlignmentVanishesWithIdentityAdapters) {
  auto data = small_data({6, 6}, 1.0, 4);
  ExpertBundle e{"e", Backbone(spec("e", {4, 6, 8}, 2), 5), Normalizer::fit(data.train)};
  e.model.set_trainable(false);
  Backbone student = e.model.clone();
  DistillConfig cfg;
  cfg.weights.ablation.sfa = false;
  DistillModules m;
  m.cfa = CfaModule{};
  m.cfa->space = SphereSpace{8};
  m.cfa->student = AffineMap::identity(8, 8, false);
  m.cfa->experts.push_back({AffineMap::identity(8, 8, false), AffineMap::identity(8, 8, true)});
  std::vector<Sample> samples(data.train.samples.begin(), data.train.samples.begin() + 4);
  auto b = distill_losses({e}, student, m, samples, e.normalizer, 16, 16, cfg);
  // Only the decoder's reconstruction of the unnormalised feature is left.
  auto deep = e.model.forward_with_taps(make_batch(detail::pointers(samples), 16, 16, e.normalizer)).deep;
  auto terms = cfa_loss({deep}, deep, *m.cfa);
  EXPECT_EQ(terms.mmd.item(), 0.0);
  EXPECT_NEAR(b.cfa, terms.mse.item(), 1e-12);
}

class DistillRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new DatasetSplits(small_data({20, 16, 20, 8}, 0.5, 9));
    auto cfg = quick_train(2);
    experts_ = new std::vector<ExpertBundle>{train_expert("a", spec("a", {4, 8, 8}, 4), *data_, cfg, 1),
                                             train_expert("b", spec("b", {6, 6, 10}, 4), *data_, cfg, 2)};
  }
  static void TearDownTestSuite() {
    delete data_;
    delete experts_;
  }

  static DistillConfig config(Method m) {
    DistillConfig c;
    c.method = m;
    c.train = quick_train(2);
    c.train.augment = true;
    c.train.seed = 21;
    c.sfa_channels = 6;
    return c;
  }

  static Backbone student() { return Backbone(spec("s", {3, 4, 6}, 4), 33); }

  static DatasetSplits* data_;
  static std::vector<ExpertBundle>* experts_;
};

DatasetSplits* DistillRun::data_ = nullptr;
std::vector<ExpertBundle>* DistillRun::experts_ = nullptr;

TEST_F(DistillRun, ExpertsAreUntouched) {
  for (Method m : {Method::umkd, Method::kd, Method::dkd}) {
    auto r = distill(*experts_, student(), *data_, config(m));
    ASSERT_EQ(r.record.expert_hashes_before.size(), 2u);
    EXPECT_EQ(r.record.expert_hashes_before, r.record.expert_hashes_after);
    EXPECT_EQ(r.record.expert_hashes_before[1], (*experts_)[1].hash);
    EXPECT_GT(r.record.initial_loss.at("total"), 0.0);
  }
}

TEST_F(DistillRun, TrainableExpertIsRejected) {
  auto experts = *experts_;
  experts[0].model = experts[0].model.clone();
  experts[0].model.set_trainable(true);
  EXPECT_THROW(distill(experts, student(), *data_, config(Method::umkd)), ContractViolation);
}

TEST_F(DistillRun, StaleExpertHashIsRejected) {
  auto experts = *experts_;
  experts[1].hash ^= 1;
  EXPECT_THROW(distill(experts, student(), *data_, config(Method::kd)), ContractViolation);
}

TEST_F(DistillRun, ZeroWeightsReduceToSupervised) {
  auto c = config(Method::umkd);
  c.weights.alpha = 0.0;
  c.weights.beta = 0.0;
  auto a = distill(*experts_, student(), *data_, c);
  auto b = distill({}, student(), *data_, config(Method::supervised));
  EXPECT_EQ(a.student.weight_hash(), b.student.weight_hash());
  EXPECT_EQ(metrics_to_json(a.record.test), metrics_to_json(b.record.test));
}

TEST_F(DistillRun, SameSeedIsBitIdentical) {
  auto a = distill(*experts_, student(), *data_, config(Method::umkd));
  auto b = distill(*experts_, student(), *data_, config(Method::umkd));
  EXPECT_EQ(a.student.weight_hash(), b.student.weight_hash());
  auto ja = a.record.to_json(), jb = b.record.to_json();
  ja.erase("wall_clock_seconds");
  jb.erase("wall_clock_seconds");
  EXPECT_EQ(ja.dump(), jb.dump());

  auto c = config(Method::umkd);
  c.train.seed = 22;
  EXPECT_NE(distill(*experts_, student(), *data_, c).student.weight_hash(), a.student.weight_hash());
}

TEST_F(DistillRun, AblatedComponentsStayZero) {
  auto c = config(Method::umkd);
  c.weights.ablation = {false, true, false};
  auto r = distill(*experts_, student(), *data_, c);
  for (const auto& e : r.record.epochs) {
    EXPECT_EQ(e.loss.at("sfa"), 0.0);
    EXPECT_EQ(e.loss.at("udd"), 0.0);
    EXPECT_GT(e.loss.at("cfa"), 0.0);
  }
  EXPECT_FALSE(r.modules.sfa.has_value());
}

TEST_F(DistillRun, MismatchedClassCountIsAConfigError) {
  EXPECT_THROW(distill(*experts_, Backbone(spec("s", {3, 4, 6}, 3), 1), *data_, config(Method::kd)), ConfigError);
}
