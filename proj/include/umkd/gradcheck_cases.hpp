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

#pragma once

#include <chrono>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "umkd/baselines.hpp"
#include "umkd/cfa.hpp"
#include "umkd/gradcheck.hpp"
#include "umkd/sfa.hpp"
#include "umkd/trainer.hpp"
#include "umkd/udd.hpp"

// Randomised finite-difference instances for every differentiable loss and
// filter. Each case builds a fresh small instance from a seed.
namespace umkd::gradcheck {

struct OpCase {
  std::string name;
  std::function<GradCheckReport(std::uint64_t seed)> run;
};

namespace detail {

inline std::vector<NamedParam> named(const std::string& prefix, const std::vector<Tensor>& ts) {
  std::vector<NamedParam> out;
  for (std::size_t i = 0; i < ts.size(); ++i) out.push_back({prefix + std::to_string(i), ts[i]});
  return out;
}

inline void append(std::vector<NamedParam>& to, const std::vector<NamedParam>& from) {
  to.insert(to.end(), from.begin(), from.end());
}

inline MsLfConfig small_mslf() {
  MsLfConfig c;
  c.kernel_sizes = {2, 4};
  c.strides = {2, 4};
  c.target_height = 4;
  c.target_width = 4;
  return c;
}

}  // namespace detail

inline std::vector<OpCase> differentiable_ops() {
  using detail::named;
  std::vector<OpCase> cases;

  cases.push_back({"mmd_loss", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor e1 = Tensor::randn({3, 4}, rng), e2 = Tensor::randn({3, 4}, rng), s = Tensor::randn({3, 4}, rng);
    const auto norm = seed % 2 ? MmdNormalization::mean_embedding : MmdNormalization::batch_sum;
    return check("mmd_loss", {{"expert0", e1}, {"expert1", e2}, {"student", s}},
                 [&] { return mmd_loss({e1, e2}, s, {}, norm); });
  }});

  cases.push_back({"mmd_loss_rff", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor e = Tensor::randn({3, 4}, rng), s = Tensor::randn({3, 4}, rng);
    MappingSpec map{MappingKind::random_fourier, 8, seed, 3.0};
    return check("mmd_loss_rff", {{"expert", e}, {"student", s}}, [&] { return mmd_loss({e}, s, map); });
  }});

  cases.push_back({"reconstruction_loss", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor o1 = Tensor::randn({2, 3}, rng), o2 = Tensor::randn({2, 5}, rng);
    Tensor d1 = Tensor::randn({2, 3}, rng), d2 = Tensor::randn({2, 5}, rng);
    return check("reconstruction_loss", {{"decoded0", d1}, {"decoded1", d2}, {"original0", o1}},
                 [&] { return reconstruction_loss({o1, o2}, {d1, d2}); });
  }});

  cases.push_back({"feature_alignment_loss", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor e = Tensor::randn({3, 4}, rng), s = Tensor::randn({3, 4}, rng);
    Tensor o = Tensor::randn({3, 5}, rng), d = Tensor::randn({3, 5}, rng);
    return check("feature_alignment_loss", {{"student", s}, {"decoded", d}},
                 [&] { return feature_alignment_loss(mmd_loss({e}, s), reconstruction_loss({o}, {d})); });
  }});

  cases.push_back({"ms_low_pass", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor x = Tensor::randn({2, 2, 8, 8}, rng);
    const auto cfg = detail::small_mslf();
    std::mt19937_64 prng(seed + 1);
    Tensor w = Tensor::randn({2, 2 * cfg.groups(), 4, 4}, prng);
    return check("ms_low_pass", {{"feature", x}}, [&] { return ops::sum(ops::mul(ms_low_pass(x, cfg), w)); });
  }});

  cases.push_back({"student_filter", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto cfg = detail::small_mslf();
    auto p = StudentFilterParams::make(2, 3, 2, cfg, rng);
    Tensor x = Tensor::randn({2, 2, 8, 8}, rng);
    Tensor w = Tensor::randn({2, 3, 4, 4}, rng);
    auto params = named("filter", p.tensors());
    params.push_back({"feature", x});
    return check("student_filter", params, [&] { return ops::sum(ops::mul(student_filter(x, p, cfg), w)); });
  }});

  cases.push_back({"sfa_loss", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    BackboneSpec e{"e", {3, 4, 4}, 2, 16, 16}, s{"s", {2, 3, 3}, 2, 16, 16};
    auto m = SfaModule::make({e, e}, s, {2, 4}, {2, 4}, 3, rng);
    Tensor f1 = Tensor::randn({2, 3, 8, 8}, rng), f2 = Tensor::randn({2, 3, 8, 8}, rng);
    Tensor fs = Tensor::randn({2, 2, 8, 8}, rng);
    std::vector<NamedParam> params{{"student_shallow", fs}};
    detail::append(params, named("module", m.tensors()));
    return check("sfa_loss", params, [&] { return sfa_loss({f1, f2}, fs, m).total; });
  }});

  cases.push_back({"adapt_and_pool", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto a = AffineMap::random(5, 3, rng, seed % 2 == 1);
    Tensor x = Tensor::randn({2, 5, 3, 3}, rng);
    Tensor w = Tensor::randn({2, 3}, rng);
    auto params = named("adapter", a.tensors());
    params.push_back({"deep", x});
    return check("adapt_and_pool", params, [&] { return ops::sum(ops::mul(adapt_and_pool(x, a), w)); });
  }});

  cases.push_back({"project_to_sphere", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor v = Tensor::randn({3, 4}, rng, 3.0);
    Tensor w = Tensor::randn({3, 4}, rng);
    return check("project_to_sphere", {{"v", v}},
                 [&] { return ops::sum(ops::mul(project_to_sphere(v, SphereSpace{4}), w)); });
  }});

  cases.push_back({"cfa_loss", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    BackboneSpec e{"e", {4, 4, 5}, 2}, s{"s", {2, 2, 3}, 2};
    auto m = CfaModule::make({e, e}, s, SphereSpace{4}, rng);
    // Pooled features far from the origin, where the sphere projection is smooth.
    Tensor d1 = Tensor::randn({3, 5, 2, 2}, rng, 3.0), d2 = Tensor::randn({3, 5, 2, 2}, rng, 3.0);
    Tensor ds = Tensor::randn({3, 3, 2, 2}, rng, 3.0);
    // Enlarged adapters keep the embeddings away from the origin as well.
    for (auto* a : {&m.student, &m.experts[0].projector, &m.experts[1].projector})
      for (auto& v : a->weight.data()) v *= 20.0;
    std::vector<NamedParam> params{{"student_deep", ds}};
    detail::append(params, named("module", m.tensors()));
    return check("cfa_loss", params, [&] { return cfa_loss({d1, d2}, ds, m).total; });
  }});

  cases.push_back({"accumulate_logits", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor z = Tensor::randn({2, 3, 5, 4}, rng);
    const int w = std::vector<int>{1, 2, 4}[seed % 3];
    const auto norm = (seed / 3) % 2 ? CellNormalization::cell_mean : CellNormalization::literal;
    std::mt19937_64 prng(seed + 1);
    Tensor probe;
    return check("accumulate_logits", {{"logits", z}}, [&] {
      Tensor a = accumulate_logits(LogitsMap(z), w, norm);
      if (!probe.defined()) probe = Tensor::randn(a.shape(), prng);
      return ops::sum(ops::mul(a, probe));
    });
  }});

  cases.push_back({"udd_cell_loss", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor t = Tensor::randn({5, 4}, rng, 2.0), s = Tensor::randn({5, 4}, rng, 2.0);
    return check("udd_cell_loss", {{"student_cells", s}}, [&] { return udd_cell_loss(t, s); });
  }});

  cases.push_back({"udd_loss", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor t1 = Tensor::randn({2, 3, 4, 4}, rng, 2.0), t2 = Tensor::randn({2, 3, 4, 4}, rng, 2.0);
    Tensor s = Tensor::randn({2, 3, 4, 4}, rng, 2.0);
    const auto norm = seed % 2 ? CellNormalization::cell_mean : CellNormalization::literal;
    return check("udd_loss", {{"student_logits", s}},
                 [&] { return udd_loss({LogitsMap(t1), LogitsMap(t2)}, LogitsMap(s), ScaleSet{}, norm); });
  }});

  cases.push_back({"total_objective", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    BackboneSpec e{"e", {3, 4, 5}, 3, 16, 16}, s{"s", {2, 3, 4}, 3, 16, 16};
    auto sfa = SfaModule::make({e}, s, {2, 4}, {2, 4}, 3, rng);
    auto cfa = CfaModule::make({e}, s, SphereSpace{4}, rng);
    Tensor es = Tensor::randn({2, 3, 8, 8}, rng), ed = Tensor::randn({2, 5, 4, 4}, rng, 3.0);
    Tensor el = Tensor::randn({2, 3, 4, 4}, rng, 2.0);
    Tensor ss = Tensor::randn({2, 2, 8, 8}, rng), sd = Tensor::randn({2, 4, 4, 4}, rng, 3.0);
    Tensor sl = Tensor::randn({2, 3, 4, 4}, rng, 2.0);
    std::uniform_real_distribution<double> u(0.1, 2.0);
    LossWeights w{u(rng), u(rng), {}};
    const std::vector<int> labels{static_cast<int>(seed % 3), static_cast<int>((seed / 3) % 3)};
    std::vector<NamedParam> params{{"student_shallow", ss}, {"student_deep", sd}, {"student_logits", sl}};
    return check("total_objective", params, [&] {
      Tensor cls = ops::cross_entropy(ops::global_avg_pool(sl), labels);
      return total_loss(cls, sfa_loss({es}, ss, sfa).total, cfa_loss({ed}, sd, cfa).total,
                        udd_loss({LogitsMap(el)}, LogitsMap(sl), ScaleSet{}), w)
          .total;
    });
  }});

  cases.push_back({"kd_loss", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor t1 = Tensor::randn({3, 4}, rng, 2.0), t2 = Tensor::randn({3, 4}, rng, 2.0), s = Tensor::randn({3, 4}, rng, 2.0);
    const double tau = std::vector<double>{1.0, 2.0, 4.0}[seed % 3];
    return check("kd_loss", {{"student_logits", s}}, [&] { return kd_baseline_loss({t1, t2}, s, tau); });
  }});

  cases.push_back({"dkd_loss", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor t = Tensor::randn({3, 4}, rng, 2.0), s = Tensor::randn({3, 4}, rng, 2.0);
    std::vector<int> labels;
    for (int i = 0; i < 3; ++i) labels.push_back(static_cast<int>(rng() % 4));
    return check("dkd_loss", {{"student_logits", s}}, [&] { return dkd_baseline_loss({t}, s, labels, {}); });
  }});

  return cases;
}

/// Every differentiable loss or filter the trainer relies on; the registry
/// must cover each name.
inline const std::vector<std::string>& required_ops() {
  static const std::vector<std::string> names{
      "mmd_loss",       "mmd_loss_rff",      "reconstruction_loss", "feature_alignment_loss",
      "ms_low_pass",    "student_filter",    "sfa_loss",            "adapt_and_pool",
      "project_to_sphere", "cfa_loss",       "accumulate_logits",   "udd_cell_loss",
      "udd_loss",       "total_objective",   "kd_loss",             "dkd_loss"};
  return names;
}

/// Names in required_ops() with no registered case.
inline std::vector<std::string> unregistered_ops(const std::vector<OpCase>& registry) {
  std::vector<std::string> missing;
  for (const auto& n : required_ops()) {
    bool found = false;
    for (const auto& c : registry) found = found || c.name == n;
    if (!found) missing.push_back(n);
  }
  return missing;
}

struct OpSummary {
  std::string op;
  int instances = 0;
  int failures = 0;
  double worst_rel_error = 0.0;
  GradCheckReport worst;
};

struct SuiteSummary {
  std::vector<OpSummary> ops;
  std::vector<std::string> missing;  // required ops without a case
  double seconds = 0.0;

  bool passed() const {
    for (const auto& o : ops)
      if (o.failures > 0) return false;
    return !ops.empty() && missing.empty();
  }

  nlohmann::ordered_json to_json() const {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& o : ops)
      arr.push_back({{"op", o.op}, {"instances", o.instances}, {"failures", o.failures},
                     {"worst_rel_error", o.worst_rel_error}, {"worst", o.worst.to_json()}});
    return {{"passed", passed()}, {"seconds", seconds}, {"missing", missing}, {"ops", arr}};
  }
};

/// Runs `instances` seeded instances of every case.
inline SuiteSummary run_suite(int instances, std::uint64_t base_seed = 0) {
  const auto start = std::chrono::steady_clock::now();
  SuiteSummary s;
  const auto registry = differentiable_ops();
  s.missing = unregistered_ops(registry);
  for (const auto& c : registry) {
    OpSummary o{c.name};
    for (int i = 0; i < instances; ++i) {
      auto r = c.run(base_seed + static_cast<std::uint64_t>(i) * 7919 + 1);
      ++o.instances;
      if (!r.passed) ++o.failures;
      if (r.max_rel_error >= o.worst_rel_error || !r.failure.empty()) {
        o.worst_rel_error = std::max(o.worst_rel_error, r.max_rel_error);
        o.worst = r;
      }
    }
    s.ops.push_back(std::move(o));
  }
  s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return s;
}

}  // namespace umkd::gradcheck
