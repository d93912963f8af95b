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

// Acceptance check: one PASS/FAIL line per criterion. Exit status is non-zero
// when any criterion fails. Set UMKD_ACCEPTANCE_SKIP_LONG=1 to skip the
// desk-scale training run (criterion 6 is then reported as SKIP).
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include <unistd.h>

#include "umkd/experiment.hpp"
#include "umkd/gradcheck_cases.hpp"

namespace fs = std::filesystem;
using namespace umkd;

namespace {

// Tolerances.
constexpr int kGradInstances = 50;
constexpr double kGradSeconds = 120.0;
constexpr int kRandomCells = 1000;
constexpr double kShiftTol = 1e-9;
constexpr double kWorkedExample = 0.915974480406291;
constexpr double kWorkedTol = 1e-6;
constexpr double kHandTol = 1e-9;
constexpr double kRescaleTol = 1e-6;
constexpr int kMetricSets = 100;
constexpr double kMetricTol = 1e-12;
constexpr int kTrendSeedsRequired = 2;
constexpr double kDeskMinutes = 45.0;

struct Outcome {
  bool pass = true;
  bool skipped = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Outcome& o) {
  const char* tag = o.skipped ? "SKIP" : (o.pass ? "PASS" : "FAIL");
  if (!o.pass && !o.skipped) ++failures;
  std::cout << tag << "  [" << id << "] " << name << "  " << o.detail << std::endl;
}

template <class F>
Outcome guarded(F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    return {false, false, std::string("exception: ") + e.what()};
  }
}

fs::path scratch_root() {
  auto p = fs::temp_directory_path() / ("umkd_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(p);
  return p;
}

ojson read_json(const fs::path& p) { return ojson::parse(read_text_file(p)); }

std::string with_output_dir(const fs::path& config, const fs::path& out) {
  auto j = ojson::parse(read_text_file(config));
  j["run"]["output_dir"] = out.string();
  return j.dump(2) + "\n";
}

double cell(const std::vector<double>& t, const std::vector<double>& s) {
  const int c = static_cast<int>(t.size());
  return udd_cell_loss(Tensor({1, c}, t), Tensor({1, c}, s)).item();
}

Outcome gradients() {
  auto s = gradcheck::run_suite(kGradInstances);
  std::ostringstream d;
  bool ok = s.passed() && s.seconds < kGradSeconds;
  double worst = 0.0;
  for (const auto& o : s.ops) {
    if (o.instances < kGradInstances) ok = false;
    if (o.failures) d << o.op << " failed " << o.failures << "/" << o.instances << "; ";
    worst = std::max(worst, o.worst_rel_error);
  }
  for (const auto& m : s.missing) d << "missing " << m << "; ";
  d << s.ops.size() << " ops x " << kGradInstances << ", worst rel err " << worst << ", " << s.seconds << " s";
  return {ok, false, d.str()};
}

Outcome uncertainty_weights() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> cdist(2, 8);
  int bad = 0;
  double worst_shift = 0.0;
  for (int i = 0; i < kRandomCells; ++i) {
    const int c = cdist(rng);
    Tensor t = Tensor::randn({1, c}, rng, 3.0);
    Tensor s = Tensor::randn({1, c}, rng, 3.0);
    const double u = uncertainty(t.values());
    const double eps = 1e-15;
    if (u < 0.0 || u > 1.0 - 1.0 / c + eps) ++bad;
    std::vector<double> shifted(t.values());
    const double k = std::uniform_real_distribution<double>(-20, 20)(rng);
    for (auto& v : shifted) v += k;
    worst_shift = std::max(worst_shift, std::abs(uncertainty(shifted) - u));
    if (2.0 + u < 2.0 || 2.0 + u > 3.0 - 1.0 / c + eps) ++bad;
    if (1.0 - u < 1.0 / c - eps || 1.0 - u > 1.0) ++bad;
    if (udd_cell_loss(t, t).item() != 0.0) ++bad;
    if (!(udd_cell_loss(t, s).item() > 0.0)) ++bad;
  }
  const double ex = cell({0.0, 0.0}, {std::log(3.0), 0.0});
  const bool ok = bad == 0 && worst_shift <= kShiftTol && std::abs(ex - kWorkedExample) <= kWorkedTol;
  std::ostringstream d;
  d << kRandomCells << " cells, " << bad << " violations, worst shift drift " << worst_shift
    << ", worked example " << std::setprecision(15) << ex;
  return {ok, false, d.str()};
}

Outcome partitions() {
  int bad = 0, grids = 0;
  for (int h = 4; h <= 9; ++h)
    for (int w = 4; w <= 9; ++w)
      for (int s : {1, 2, 4}) {
        ++grids;
        std::set<int> seen;
        std::size_t total = 0;
        for (const auto& c : partition_cells(h, w, s)) {
          if (c.empty()) ++bad;
          total += c.size();
          seen.insert(c.begin(), c.end());
        }
        if (total != static_cast<std::size_t>(h * w) || seen.size() != total) ++bad;
        if (!seen.empty() && (*seen.begin() != 0 || *seen.rbegin() != h * w - 1)) ++bad;
      }
  // Scale 1 accumulates every position into a single cell.
  std::mt19937_64 rng(5);
  double worst = 0.0;
  for (int h = 4; h <= 9; ++h) {
    LogitsMap m(Tensor::randn({2, 3, h, h + 1}, rng));
    Tensor psi = accumulate_logits(m, 1);
    const int hw = h * (h + 1);
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < 3; ++c) {
        double sum = 0.0;
        for (int i = 0; i < hw; ++i) sum += m.values()[(b * 3 + c) * hw + i];
        worst = std::max(worst, std::abs(psi[b * 3 + c] - sum));
      }
  }
  std::ostringstream d;
  d << grids << " grids, " << bad << " violations, scale-1 sum error " << worst;
  return {bad == 0 && worst <= 1e-12, false, d.str()};
}

Outcome alignment_examples() {
  const double mmd = mmd_loss({Tensor({2, 1}, {1, 2})}, Tensor({2, 1}, {0, 0})).item();
  const double mse1 = reconstruction_loss({Tensor({1, 2}, {1, 2})}, {Tensor::zeros({1, 2})}).item();
  Tensor z = Tensor::zeros({2, 2}), o = Tensor::full({2, 2}, 1.0);
  const double mse2 = reconstruction_loss({z, o}, {o, z}).item();
  std::mt19937_64 rng(11);
  Tensor a = Tensor::randn({4, 5}, rng);
  const double self = mmd_loss({a, a}, a).item();

  BackboneSpec e1{"e1", {4, 4, 6, 8}, 3}, e2{"e2", {4, 4, 6, 10}, 3}, s{"s", {2, 2, 3, 5}, 3};
  auto m = CfaModule::make({e1, e2}, s, SphereSpace{6}, rng);
  Tensor d1 = Tensor::randn({3, 8, 2, 2}, rng), d2 = Tensor::randn({3, 10, 2, 2}, rng);
  Tensor ds = Tensor::randn({3, 5, 2, 2}, rng);
  const auto base = cfa_loss({d1, d2}, ds, m);
  double drift = 0.0;
  for (double c : {0.01, 0.5, 3.0, 250.0}) {
    drift = std::max(drift, std::abs(cfa_loss({d1, d2}, ops::scale(ds, c), m).total.item() - base.total.item()));
    drift = std::max(drift,
                     std::abs(cfa_loss({ops::scale(d1, c), ops::scale(d2, c)}, ds, m).mmd.item() - base.mmd.item()));
  }
  const bool ok = std::abs(mmd - 4.5) <= kHandTol && std::abs(mse1 - 5.0) <= kHandTol &&
                  std::abs(mse2 - 8.0) <= kHandTol && std::abs(self) <= kHandTol && drift <= kRescaleTol;
  std::ostringstream d;
  d << "mmd " << mmd << " (4.5), mse " << mse1 << " (5), " << mse2 << " (8), self-mmd " << self
    << ", rescaling drift " << drift;
  return {ok, false, d.str()};
}

struct Naive {
  double oa, macc, f1, mae;
};

Naive naive_metrics(const std::vector<int>& p, const std::vector<int>& y, int c) {
  const double n = static_cast<double>(p.size());
  double correct = 0, abs_err = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    correct += p[i] == y[i];
    abs_err += std::abs(p[i] - y[i]);
  }
  double recall_sum = 0, f1 = 0;
  int supported = 0;
  for (int k = 0; k < c; ++k) {
    double tp = 0, sup = 0, pred = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      tp += p[i] == k && y[i] == k;
      sup += y[i] == k;
      pred += p[i] == k;
    }
    if (sup > 0) {
      recall_sum += tp / sup;
      ++supported;
    }
    if (sup > 0 && pred > 0 && tp > 0) {
      const double pr = tp / pred, rc = tp / sup;
      f1 += sup / n * (2 * pr * rc / (pr + rc));
    }
  }
  return {correct / n, recall_sum / supported, f1, abs_err / n};
}

Outcome metrics() {
  auto h = compute_metrics({0, 1, 2, 2}, {0, 1, 2, 1}, 3);
  bool ok = h.oa == 0.75 && std::abs(h.macc - 2.5 / 3.0) <= kMetricTol && std::abs(h.weighted_f1 - 0.75) <= kMetricTol &&
            h.mae == 0.25;
  std::mt19937_64 rng(99);
  int mismatches = 0;
  for (int t = 0; t < kMetricSets; ++t) {
    const int c = std::uniform_int_distribution<int>(2, 6)(rng);
    const int n = std::uniform_int_distribution<int>(1, 60)(rng);
    std::uniform_int_distribution<int> cls(0, c - 1);
    std::vector<int> p(n), y(n);
    for (int i = 0; i < n; ++i) {
      y[i] = cls(rng);
      p[i] = std::bernoulli_distribution(0.6)(rng) ? y[i] : cls(rng);
    }
    auto r = compute_metrics(p, y, c);
    auto b = naive_metrics(p, y, c);
    if (std::abs(r.oa - b.oa) > kMetricTol || std::abs(r.macc - b.macc) > kMetricTol ||
        std::abs(r.weighted_f1 - b.f1) > kMetricTol || std::abs(r.mae - b.mae) > kMetricTol)
      ++mismatches;
  }
  std::ostringstream d;
  d << "hand example oa " << h.oa << " macc " << h.macc << " f1 " << h.weighted_f1 << " mae " << h.mae << "; "
    << mismatches << "/" << kMetricSets << " brute-force mismatches";
  return {ok && mismatches == 0, false, d.str()};
}

// Collects every (before, after) hash pair from a run directory.
int hash_pairs(const fs::path& dir, int& mismatched) {
  int pairs = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.path().filename() != "record.json") continue;
    auto j = read_json(e.path());
    if (!j.contains("expert_hashes_before")) continue;
    const auto& b = j["expert_hashes_before"];
    const auto& a = j["expert_hashes_after"];
    if (b.size() != a.size() || b.empty()) ++mismatched;
    for (std::size_t i = 0; i < std::min(b.size(), a.size()); ++i) {
      ++pairs;
      if (b[i] != a[i]) ++mismatched;
    }
  }
  return pairs;
}

double median_macc(const ojson& summary, const std::string& name) {
  for (const auto& m : summary["methods"])
    if (m["name"] == name) return m["median"]["macc"].get<double>();
  throw std::runtime_error("no method " + name + " in summary");
}

double seed_macc(const ojson& summary, const std::string& name, const std::string& seed) {
  for (const auto& m : summary["methods"])
    if (m["name"] == name) return m["per_seed"][seed]["macc"].get<double>();
  throw std::runtime_error("no method " + name + " in summary");
}

}  // namespace

int main() {
  const fs::path src = UMKD_SOURCE_DIR;
  const fs::path root = scratch_root();
  std::ostringstream quiet;
  RunOptions opt;
  opt.log = &quiet;

  report(1, "gradient check of every differentiable op", guarded(gradients));
  report(2, "uncertainty weights and cell loss algebra", guarded(uncertainty_weights));
  report(3, "cell partitions cover every grid", guarded(partitions));
  report(4, "alignment loss hand examples and rescaling", guarded(alignment_examples));
  report(5, "metrics hand example and brute force", guarded(metrics));

  const fs::path desk = root / "desk";
  const bool skip_long = std::getenv("UMKD_ACCEPTANCE_SKIP_LONG") != nullptr;
  bool desk_ran = false;
  if (skip_long) {
    report(6, "UMKD beats KD and the UDD ablation on the imbalanced target", {true, true, "skipped by request"});
  } else {
    report(6, "UMKD beats KD and the UDD ablation on the imbalanced target", guarded([&]() -> Outcome {
             const auto t0 = std::chrono::steady_clock::now();
             auto res = run_experiment(with_output_dir(src / "configs/desk_target_imbalanced.json", desk), opt);
             const double minutes =
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
             desk_ran = true;
             const auto& s = res.summary;
             const double umkd = median_macc(s, "umkd"), kd = median_macc(s, "kd"),
                          ablated = median_macc(s, "umkd_no_udd");
             int beats_kd = 0, beats_ablation = 0;
             std::ostringstream d;
             d << "median mAcc umkd " << umkd << " kd " << kd << " umkd_no_udd " << ablated << "; per seed";
             for (const auto& seed : s["seeds"]) {
               const std::string k = std::to_string(seed.get<std::uint64_t>());
               const double u = seed_macc(s, "umkd", k), b = seed_macc(s, "kd", k),
                            a = seed_macc(s, "umkd_no_udd", k);
               beats_kd += u >= b;
               beats_ablation += u > a;
               d << " [" << k << ": " << u << "/" << b << "/" << a << "]";
             }
             d << "; " << minutes << " min";
             const bool ok = umkd >= kd && umkd > ablated && beats_kd >= kTrendSeedsRequired &&
                             beats_ablation >= kTrendSeedsRequired && minutes < kDeskMinutes;
             return {ok, false, d.str()};
           }));
  }

  const fs::path smoke_a = root / "smoke_a", smoke_b = root / "smoke_b";
  bool smoke_ok = false;
  Outcome repro = guarded([&]() -> Outcome {
    run_experiment(with_output_dir(src / "configs/smoke.json", smoke_a), opt);
    run_experiment(with_output_dir(src / "configs/smoke.json", smoke_b), opt);
    smoke_ok = true;
    int files = 0, differing = 0;
    for (const auto& e : fs::recursive_directory_iterator(smoke_a)) {
      if (e.path().filename() != "metrics.json") continue;
      ++files;
      const auto twin = smoke_b / fs::relative(e.path(), smoke_a);
      if (!fs::exists(twin) || read_text_file(e.path()) != read_text_file(twin)) ++differing;
    }
    std::ostringstream d;
    d << files << " metrics files, " << differing << " differ";
    return {files > 0 && differing == 0, false, d.str()};
  });

  report(7, "expert weights unchanged by distillation", guarded([&]() -> Outcome {
           int mismatched = 0, pairs = 0;
           if (desk_ran) pairs += hash_pairs(desk, mismatched);
           if (smoke_ok) pairs += hash_pairs(smoke_a, mismatched) + hash_pairs(smoke_b, mismatched);
           std::ostringstream d;
           d << pairs << " before/after hash pairs, " << mismatched << " mismatched";
           return {pairs > 0 && mismatched == 0, false, d.str()};
         }));
  report(8, "repeated runs give byte-identical metrics", repro);

  std::error_code ec;
  fs::remove_all(root, ec);
  std::cout << (failures ? "acceptance: FAILED (" + std::to_string(failures) + ")" : std::string("acceptance: all passed"))
            << std::endl;
  return failures ? 1 : 0;
}
