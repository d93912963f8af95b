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

#include <algorithm>
#include <random>

#include "umkd/align_losses.hpp"
#include "umkd/gradcheck.hpp"

using namespace umkd;

TEST(MmdLoss, IdenticalBatchesGiveZero) {
  std::mt19937_64 rng(1);
  Tensor x = Tensor::randn({5, 3}, rng);
  EXPECT_EQ(mmd_loss({x}, x).item(), 0.0);
}

TEST(MmdLoss, HandExamples) {
  // Equal sums cancel even though the samples differ.
  EXPECT_NEAR(mmd_loss({Tensor({2, 1}, {1, 3})}, Tensor({2, 1}, {2, 2})).item(), 0.0, 1e-9);
  EXPECT_NEAR(mmd_loss({Tensor({2, 1}, {1, 2})}, Tensor({2, 1}, {0, 0})).item(), 4.5, 1e-9);
  EXPECT_NEAR(mmd_loss({Tensor({2, 1}, {1, 2})}, Tensor({2, 1}, {0, 0}), {}, MmdNormalization::mean_embedding).item(),
              2.25, 1e-9);
}

TEST(MmdLoss, SumsOverExperts) {
  Tensor e({2, 1}, {1, 2});
  Tensor s({2, 1}, {0, 0});
  EXPECT_NEAR(mmd_loss({e, e}, s).item(), 9.0, 1e-9);
}

TEST(MmdLoss, InvariantToPermutationWithinBatch) {
  std::mt19937_64 rng(2);
  for (auto kind : {MappingKind::identity, MappingKind::random_fourier}) {
    MappingSpec map{kind, 16, 3, 1.5};
    Tensor e = Tensor::randn({6, 4}, rng);
    Tensor s = Tensor::randn({6, 4}, rng);
    std::vector<double> rows(s.values());
    std::vector<double> perm;
    for (int r : {3, 0, 5, 1, 4, 2}) perm.insert(perm.end(), rows.begin() + r * 4, rows.begin() + r * 4 + 4);
    const double a = mmd_loss({e}, s, map).item();
    const double b = mmd_loss({e}, Tensor({6, 4}, perm), map).item();
    EXPECT_GE(a, 0.0);
    EXPECT_NEAR(a, b, 1e-9 * std::max(1.0, a));
  }
}

TEST(MmdLoss, Errors) {
  EXPECT_THROW(mmd_loss({}, Tensor::zeros({2, 2})), InputError);
  EXPECT_THROW(mmd_loss({Tensor::zeros({3, 2})}, Tensor::zeros({2, 2})), InputError);
  EXPECT_THROW(mmd_loss({Tensor::zeros({2, 3})}, Tensor::zeros({2, 2})), InputError);
  MappingSpec bad{MappingKind::random_fourier, 0};
  EXPECT_THROW(mmd_loss({Tensor::zeros({2, 2})}, Tensor::zeros({2, 2}), bad), ConfigError);
}

TEST(RandomFourier, ApproximatesGaussianKernel) {
  std::mt19937_64 rng(4);
  MappingSpec map{MappingKind::random_fourier, 4096, 11, 2.0};
  Tensor x = Tensor::randn({2, 3}, rng);
  Tensor phi = apply_mapping(x, map);
  double dot = 0.0, d2 = 0.0;
  for (int i = 0; i < 4096; ++i) dot += phi[i] * phi[4096 + i];
  for (int i = 0; i < 3; ++i) d2 += (x[i] - x[3 + i]) * (x[i] - x[3 + i]);
  EXPECT_NEAR(dot, std::exp(-d2 / (2.0 * 4.0)), 0.05);
}

TEST(ReconstructionLoss, HandExamples) {
  Tensor a = Tensor({1, 2}, {1, 2});
  EXPECT_EQ(reconstruction_loss({a}, {a}).item(), 0.0);
  EXPECT_NEAR(reconstruction_loss({a}, {Tensor::zeros({1, 2})}).item(), 5.0, 1e-9);
  Tensor z = Tensor::zeros({2, 2});
  Tensor o = Tensor::full({2, 2}, 1.0);
  EXPECT_NEAR(reconstruction_loss({z, o}, {o, z}).item(), 8.0, 1e-9);
  EXPECT_THROW(reconstruction_loss({z}, {Tensor::zeros({4})}), InputError);
}

TEST(ReconstructionLoss, DoesNotReachFrozenExpertFeatures) {
  std::mt19937_64 rng(5);
  Tensor feat = Tensor::randn({3, 4}, rng);  // frozen expert output, no grad
  ProjectionPair pair{AffineMap::random(4, 2, rng, true), AffineMap::random(2, 4, rng, true)};
  Tensor loss = reconstruction_loss({feat}, {pair.decoder.apply(pair.projector.apply(feat))});
  backward(loss);
  EXPECT_FALSE(feat.requires_grad());
  for (const auto& t : pair.projector.tensors()) {
    const auto g = t.grad();
    EXPECT_TRUE(std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; }));
  }
}

TEST(FeatureAlignmentLoss, SumAndErrors) {
  EXPECT_EQ(feature_alignment_loss(Tensor({}, {0.0}), Tensor({}, {0.0})).item(), 0.0);
  EXPECT_DOUBLE_EQ(feature_alignment_loss(Tensor({}, {4.5}), Tensor({}, {5.0})).item(), 9.5);
  EXPECT_THROW(feature_alignment_loss(Tensor({}, {std::nan("")}), Tensor({}, {0.0})), NumericError);
}

TEST(AlignmentGradients, MatchFiniteDifferences) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(100 + seed);
    Tensor e1 = Tensor::randn({3, 4}, rng), e2 = Tensor::randn({3, 4}, rng), s = Tensor::randn({3, 4}, rng);
    for (auto kind : {MappingKind::identity, MappingKind::random_fourier}) {
      MappingSpec map{kind, 8, static_cast<std::uint64_t>(seed), 1.0};
      auto r = gradcheck::check("mmd", {{"e1", e1}, {"e2", e2}, {"s", s}}, [&] { return mmd_loss({e1, e2}, s, map); });
      EXPECT_TRUE(r.passed) << "seed " << seed << " err " << r.max_rel_error;
    }
    Tensor d = Tensor::randn({3, 4}, rng);
    auto r = gradcheck::check("mse", {{"d", d}}, [&] { return reconstruction_loss({e1}, {d}); });
    EXPECT_TRUE(r.passed) << r.max_rel_error;
  }
}
