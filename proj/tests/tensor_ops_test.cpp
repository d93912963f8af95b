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

#include <random>

#include "umkd/gradcheck.hpp"
#include "umkd/ops.hpp"

using namespace umkd;

namespace {

std::mt19937_64 rng_for(std::uint64_t seed) { return std::mt19937_64(seed); }

// Fixed random projection so every output element contributes a distinct weight.
Tensor probe(const Tensor& t, std::uint64_t seed) {
  auto rng = rng_for(seed);
  return ops::sum(ops::mul(t, Tensor::randn(t.shape(), rng)));
}

}  // namespace

TEST(Tensor, RejectsValueCountMismatch) {
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), InputError);
}

TEST(Tensor, BackwardAccumulatesThroughSharedInputs) {
  Tensor x({3}, {1.0, 2.0, 3.0}, true);
  Tensor y = ops::sum(ops::add(ops::square(x), x));  // sum(x^2 + x)
  backward(y);
  const auto g = x.grad();
  EXPECT_DOUBLE_EQ(g[0], 3.0);
  EXPECT_DOUBLE_EQ(g[1], 5.0);
  EXPECT_DOUBLE_EQ(g[2], 7.0);
}

TEST(Tensor, NoGradGuardStopsRecording) {
  Tensor x({2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  Tensor y = ops::sum(ops::square(x));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, DetachCutsTheGraph) {
  Tensor x({2}, {1.0, 2.0}, true);
  Tensor y = ops::sum(ops::mul(x.detach(), x));
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 2.0);
}

TEST(Ops, Conv2dMatchesDirectSum) {
  // 1x1x3x3 input, 1x1x2x2 kernel, stride 1, no padding.
  Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w({1, 1, 2, 2}, {1, 0, 0, -1});
  Tensor b({1}, {0.5});
  Tensor y = ops::conv2d(x, w, b, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, -4.0 + 0.5);
}

TEST(Ops, AvgPoolBlocks) {
  std::vector<double> v(16);
  for (int i = 0; i < 16; ++i) v[i] = i + 1;
  Tensor y = ops::avg_pool2d(Tensor({1, 1, 4, 4}, v), 2, 2);
  EXPECT_EQ(y.values(), (std::vector<double>{3.5, 5.5, 11.5, 13.5}));
  EXPECT_THROW(ops::avg_pool2d(Tensor({1, 1, 4, 4}, v), 5, 1), InputError);
}

TEST(Ops, ResizeBilinearIdentityAtSameSize) {
  auto rng = rng_for(3);
  Tensor x = Tensor::randn({2, 3, 5, 4}, rng);
  Tensor y = ops::resize_bilinear(x, 5, 4);
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i], 1e-15);
}

TEST(Ops, L2NormalizeClampsZeroRows) {
  Tensor x({2, 2}, {3, 4, 0, 0});
  Tensor y = ops::l2_normalize_rows(x, 1e-12);
  EXPECT_DOUBLE_EQ(y[0], 0.6);
  EXPECT_DOUBLE_EQ(y[1], 0.8);
  EXPECT_DOUBLE_EQ(y[2], 0.0);
}

TEST(Ops, ShapeErrors) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  EXPECT_THROW(ops::add(a, b), InputError);
  EXPECT_THROW(ops::matmul(a, a), InputError);
  EXPECT_THROW(ops::conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor(), 1, 1), InputError);
}

struct OpCase {
  const char* name;
  std::function<Tensor(const std::vector<Tensor>&)> fn;
  std::vector<Shape> shapes;
};

class OpGradients : public ::testing::TestWithParam<int> {};

TEST_P(OpGradients, MatchFiniteDifferences) {
  const std::vector<OpCase> cases = {
      {"conv2d", [](const auto& t) { return ops::conv2d(t[0], t[1], t[2], 2, 1); }, {{2, 3, 5, 5}, {4, 3, 3, 3}, {4}}},
      {"conv2d_grouped", [](const auto& t) { return ops::conv2d(t[0], t[1], t[2], 1, 1, 4); },
       {{2, 4, 4, 4}, {4, 1, 3, 3}, {4}}},
      {"avg_pool2d", [](const auto& t) { return ops::avg_pool2d(t[0], 2, 1); }, {{2, 2, 5, 5}}},
      {"resize_bilinear", [](const auto& t) { return ops::resize_bilinear(t[0], 7, 3); }, {{1, 2, 3, 5}}},
      {"concat", [](const auto& t) { return ops::concat_channels({t[0], t[1]}); }, {{2, 1, 3, 3}, {2, 2, 3, 3}}},
      {"linear", [](const auto& t) { return ops::linear(t[0], t[1], t[2]); }, {{3, 4}, {5, 4}, {5}}},
      {"matmul", [](const auto& t) { return ops::matmul(t[0], t[1]); }, {{3, 4}, {4, 2}}},
      {"softmax", [](const auto& t) { return ops::softmax_rows(t[0]); }, {{3, 4}}},
      {"log_softmax", [](const auto& t) { return ops::log_softmax_rows(t[0]); }, {{3, 4}}},
      {"l2_normalize", [](const auto& t) { return ops::l2_normalize_rows(t[0], 1e-12); }, {{3, 4}}},
      {"global_avg_pool", [](const auto& t) { return ops::global_avg_pool(t[0]); }, {{2, 3, 2, 2}}},
      {"cell_sum", [](const auto& t) { return ops::cell_sum(t[0], {{0, 1}, {2, 3, 5}}, {0.25, 0.5}); }, {{2, 3, 2, 3}}},
      {"cos_exp", [](const auto& t) { return ops::exp(ops::cos(t[0])); }, {{6}}},
  };
  const int seed = GetParam();
  for (const auto& c : cases) {
    auto rng = rng_for(static_cast<std::uint64_t>(seed) * 131 + 7);
    std::vector<NamedParam> inputs;
    std::vector<Tensor> tensors;
    for (std::size_t i = 0; i < c.shapes.size(); ++i) {
      Tensor t = Tensor::randn(c.shapes[i], rng, 1.0, true);
      tensors.push_back(t);
      inputs.push_back({"in" + std::to_string(i), t});
    }
    auto report = gradcheck::check(c.name, inputs, [&]() { return probe(c.fn(tensors), 99); });
    EXPECT_TRUE(report.passed) << c.name << " seed " << seed << " max rel err " << report.max_rel_error;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradients, ::testing::Range(0, 5));

TEST(GradCheck, QuadraticIsExact) {
  auto report = gradcheck::check(
      "square", [](std::span<const double> x) { return x[0] * x[0]; },
      [](std::span<const double> x) { return std::vector<double>{2.0 * x[0]}; }, {3.0}, 1e-3, 1e-6);
  EXPECT_TRUE(report.passed);
  EXPECT_NEAR(report.params[0].numeric, 6.0, 1e-9);
}

TEST(GradCheck, DetectsWrongGradient) {
  auto report = gradcheck::check(
      "wrong", [](std::span<const double> x) { return x[0] * x[0]; },
      [](std::span<const double> x) { return std::vector<double>{3.0 * x[0]}; }, {3.0});
  EXPECT_FALSE(report.passed);
}

TEST(GradCheck, ReportsNonFiniteCoordinate) {
  auto report = gradcheck::check(
      "log", [](std::span<const double> x) { return std::log(x[0]); },
      [](std::span<const double> x) { return std::vector<double>{1.0 / x[0]}; }, {0.0005});
  EXPECT_FALSE(report.passed);
  EXPECT_NE(report.failure.find("coordinate 0"), std::string::npos);
}
