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

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "umkd/baselines.hpp"
#include "umkd/cfa.hpp"
#include "umkd/datasets.hpp"
#include "umkd/metrics.hpp"
#include "umkd/optim.hpp"
#include "umkd/sfa.hpp"
#include "umkd/udd.hpp"

namespace umkd {

enum class Method { umkd, kd, dkd, supervised };
enum class Protocol { sources_imbalanced, target_imbalanced };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::umkd: return "umkd";
    case Method::kd: return "kd";
    case Method::dkd: return "dkd";
    case Method::supervised: return "supervised";
  }
  return "?";
}

inline std::string to_string(Protocol p) {
  return p == Protocol::sources_imbalanced ? "sources_imbalanced" : "target_imbalanced";
}

/// Which UMKD components take part in the objective.
struct Ablation {
  bool sfa = true;
  bool cfa = true;
  bool udd = true;
};

struct LossWeights {
  double alpha = 1.0;  // feature alignment
  double beta = 1.0;   // UDD
  Ablation ablation;
};

/// Supervised training of one expert from scratch.
struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  bool augment = true;

  void validate() const {
    detail::require<ConfigError>(epochs >= 1, "train: epochs must be >= 1");
    detail::require<ConfigError>(batch_size >= 2, "train: batch_size must be >= 2");
    optimizer.validate();
  }
};

struct DistillConfig {
  Method method = Method::umkd;
  Protocol protocol = Protocol::sources_imbalanced;
  LossWeights weights;
  ScaleSet scales;
  CellNormalization cell_normalization = CellNormalization::literal;
  std::vector<int> sfa_kernels{2, 4, 8};
  std::vector<int> sfa_strides{2, 4, 8};
  int sfa_channels = 16;        // shared SFA projection width
  SphereSpace sphere{0, 1e-12}; // dim 0: use the student's deep width
  MappingSpec mapping;
  MmdNormalization mmd_normalization = MmdNormalization::batch_sum;
  double kd_temperature = 4.0;
  double kd_weight = 1.0;
  DkdWeights dkd;
  TrainConfig train{60, 32, {}, 0, true};

  void validate() const {
    detail::require<ConfigError>(std::isfinite(weights.alpha) && weights.alpha >= 0.0, "distill: alpha must be finite and >= 0");
    detail::require<ConfigError>(std::isfinite(weights.beta) && weights.beta >= 0.0, "distill: beta must be finite and >= 0");
    detail::require<ConfigError>(train.batch_size >= 2, "distill: batch_size must be >= 2 (MMD needs a batch)");
    detail::require<ConfigError>(sfa_channels >= 1, "distill: sfa channels must be >= 1");
    detail::require<ConfigError>(kd_temperature > 0.0, "distill: kd temperature must be > 0");
    detail::require<ConfigError>(dkd.temperature > 0.0, "distill: dkd temperature must be > 0");
    scales.validate();
    mapping.validate();
    train.validate();
  }
};

/// Weighted objective with its parts. Component values are unweighted.
struct LossBreakdown {
  Tensor total;
  double cls = 0.0, sfa = 0.0, cfa = 0.0, udd = 0.0, kd = 0.0;
  double total_value = 0.0;
};

namespace detail {

inline double checked_component(const Tensor& t, const char* name) {
  if (!t.defined()) return 0.0;
  const double v = t.item();
  require<NumericError>(std::isfinite(v), std::string("total_loss: non-finite ") + name + " loss");
  require<NumericError>(v >= 0.0, std::string("total_loss: negative ") + name + " loss");
  return v;
}

inline Tensor accumulate(const Tensor& acc, const Tensor& term) { return acc.defined() ? ops::add(acc, term) : term; }

}  // namespace detail

/// L = L_cls + alpha * (L_SFA + L_CFA) + beta * L_UDD. Undefined or ablated
/// components contribute nothing.
inline LossBreakdown total_loss(const Tensor& cls, const Tensor& sfa, const Tensor& cfa, const Tensor& udd,
                                const LossWeights& w) {
  LossBreakdown b;
  b.cls = detail::checked_component(cls, "cls");
  Tensor total = cls;
  if (w.ablation.sfa && sfa.defined()) {
    b.sfa = detail::checked_component(sfa, "SFA");
    total = detail::accumulate(total, ops::scale(sfa, w.alpha));
  }
  if (w.ablation.cfa && cfa.defined()) {
    b.cfa = detail::checked_component(cfa, "CFA");
    total = detail::accumulate(total, ops::scale(cfa, w.alpha));
  }
  if (w.ablation.udd && udd.defined()) {
    b.udd = detail::checked_component(udd, "UDD");
    total = detail::accumulate(total, ops::scale(udd, w.beta));
  }
  b.total = total;
  b.total_value = total.item();
  detail::require<NumericError>(std::isfinite(b.total_value), "total_loss: non-finite total");
  return b;
}

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  std::map<std::string, double> loss;  // mean over the epoch's batches
  double grad_norm = 0.0;              // mean pre-clipping norm
  MetricsReport val;
};

struct TrainRunRecord {
  std::string role;  // "expert:<name>" or the distillation method
  std::vector<EpochRecord> epochs;
  std::map<std::string, double> initial_loss;
  MetricsReport test;
  nlohmann::ordered_json config;
  std::vector<std::uint64_t> expert_hashes_before, expert_hashes_after;
  double wall_clock_seconds = 0.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["role"] = role;
    j["config"] = config;
    auto hex = [](std::uint64_t h) {
      char buf[17];
      std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
      return std::string(buf);
    };
    if (!expert_hashes_before.empty()) {
      auto before = nlohmann::ordered_json::array(), after = nlohmann::ordered_json::array();
      for (auto h : expert_hashes_before) before.push_back(hex(h));
      for (auto h : expert_hashes_after) after.push_back(hex(h));
      j["expert_hashes_before"] = before;
      j["expert_hashes_after"] = after;
    }
    if (!initial_loss.empty()) j["initial_loss"] = initial_loss;
    auto ep = nlohmann::ordered_json::array();
    for (const auto& e : epochs)
      ep.push_back({{"epoch", e.epoch}, {"lr", e.lr}, {"loss", e.loss}, {"grad_norm", e.grad_norm},
                    {"val", metrics_to_json(e.val)}});
    j["epochs"] = ep;
    j["test"] = metrics_to_json(test);
    j["wall_clock_seconds"] = wall_clock_seconds;
    return j;
  }
};

/// A frozen expert together with the input statistics it was trained on.
struct ExpertBundle {
  std::string name;
  Backbone model;
  Normalizer normalizer;
  std::uint64_t hash = 0;
  TrainRunRecord record;
};

namespace detail {

/// Shuffled mini-batches; a trailing batch of one sample is dropped.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  seeded_shuffle(order, rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, i + static_cast<std::size_t>(batch_size));
    if (end - i >= 2) batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

inline std::vector<Sample> gather(const GradingDataset& ds, const std::vector<std::size_t>& idx, bool augment_on,
                                  std::mt19937_64& rng) {
  std::vector<Sample> out;
  out.reserve(idx.size());
  for (auto i : idx)
    out.push_back(augment(ds.samples[i], ds.height, ds.width, augment_on ? AugmentPolicy::train : AugmentPolicy::eval, rng));
  return out;
}

inline std::vector<const Sample*> pointers(const std::vector<Sample>& s) {
  std::vector<const Sample*> p;
  for (const auto& x : s) p.push_back(&x);
  return p;
}

inline std::vector<int> labels_of(const std::vector<Sample>& s) {
  std::vector<int> l;
  for (const auto& x : s) l.push_back(x.label);
  return l;
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  const int b = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) {
    int best = 0;
    for (int k = 1; k < c; ++k)
      if (logits[i * c + k] > logits[i * c + best]) best = k;
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 step: decorrelates streams derived from one run seed.
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline void add_loss(std::map<std::string, double>& acc, const LossBreakdown& b) {
  acc["cls"] += b.cls;
  acc["sfa"] += b.sfa;
  acc["cfa"] += b.cfa;
  acc["udd"] += b.udd;
  acc["kd"] += b.kd;
  acc["total"] += b.total_value;
}

}  // namespace detail

inline MetricsReport evaluate(const Backbone& model, const GradingDataset& ds, const Normalizer& norm,
                              int batch_size = 64) {
  detail::require(ds.size() >= 1, "evaluate: empty dataset '" + ds.name + "'");
  NoGradGuard ng;
  std::vector<int> preds;
  for (std::size_t i = 0; i < ds.size(); i += static_cast<std::size_t>(batch_size)) {
    std::vector<const Sample*> ptrs;
    for (std::size_t k = i; k < std::min(ds.size(), i + static_cast<std::size_t>(batch_size)); ++k)
      ptrs.push_back(&ds.samples[k]);
    auto p = detail::argmax_rows(model.forward_with_taps(make_batch(ptrs, ds.height, ds.width, norm)).pooled_logits);
    preds.insert(preds.end(), p.begin(), p.end());
  }
  return compute_metrics(preds, ds.labels(), ds.num_classes);
}

/// Trains an expert with cross-entropy on `data.train`, then freezes it.
inline ExpertBundle train_expert(const std::string& name, const BackboneSpec& spec, const DatasetSplits& data,
                                 const TrainConfig& cfg, std::uint64_t model_seed) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  ExpertBundle b{name, Backbone(spec, model_seed), Normalizer::fit(data.train)};
  b.model.set_trainable(true);
  std::vector<Tensor> params;
  for (const auto& p : b.model.parameters()) params.push_back(p.tensor);
  Optimizer opt(params, cfg.optimizer);
  std::mt19937_64 order_rng(detail::derive_seed(cfg.seed, 1)), aug_rng(detail::derive_seed(cfg.seed, 2));
  const std::int64_t steps_per_epoch =
      static_cast<std::int64_t>(detail::epoch_batches(data.train.size(), cfg.batch_size, order_rng).size());
  order_rng.seed(detail::derive_seed(cfg.seed, 1));
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  std::int64_t step = 0;
  b.record.role = "expert:" + name;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord er{epoch, scheduled_lr(cfg.optimizer, step, total_steps)};
    double norm_sum = 0.0;
    auto batches = detail::epoch_batches(data.train.size(), cfg.batch_size, order_rng);
    for (const auto& idx : batches) {
      auto samples = detail::gather(data.train, idx, cfg.augment, aug_rng);
      Tensor x = make_batch(detail::pointers(samples), data.train.height, data.train.width, b.normalizer);
      Tensor cls = ops::cross_entropy(b.model.forward_with_taps(x).pooled_logits, detail::labels_of(samples));
      auto breakdown = total_loss(cls, {}, {}, {}, {});
      opt.zero_grad();
      backward(breakdown.total);
      norm_sum += opt.step(scheduled_lr(cfg.optimizer, step++, total_steps));
      detail::add_loss(er.loss, breakdown);
    }
    for (auto& [k, v] : er.loss) v /= static_cast<double>(batches.size());
    er.grad_norm = norm_sum / static_cast<double>(batches.size());
    if (!data.val.samples.empty()) er.val = evaluate(b.model, data.val, b.normalizer);
    b.record.epochs.push_back(std::move(er));
  }
  b.model.set_trainable(false);
  if (!data.test.samples.empty()) b.record.test = evaluate(b.model, data.test, b.normalizer);
  b.hash = b.model.weight_hash();
  b.record.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return b;
}

/// Trainable alignment state created for a UMKD run.
struct DistillModules {
  std::optional<SfaModule> sfa;
  std::optional<CfaModule> cfa;

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> t;
    if (sfa)
      for (auto& x : sfa->tensors()) t.push_back(x);
    if (cfa)
      for (auto& x : cfa->tensors()) t.push_back(x);
    return t;
  }
};

inline int resolved_sphere_dim(const DistillConfig& cfg, const BackboneSpec& student) {
  return cfg.sphere.dim > 0 ? cfg.sphere.dim : student.deep_channels();
}

inline DistillModules make_distill_modules(const std::vector<ExpertBundle>& experts, const BackboneSpec& student,
                                           const DistillConfig& cfg) {
  DistillModules m;
  if (cfg.method != Method::umkd) return m;
  std::vector<BackboneSpec> specs;
  for (const auto& e : experts) specs.push_back(e.model.spec());
  std::mt19937_64 rng(detail::derive_seed(cfg.train.seed, 3));
  if (cfg.weights.ablation.sfa)
    m.sfa = SfaModule::make(specs, student, cfg.sfa_kernels, cfg.sfa_strides, cfg.sfa_channels, rng);
  if (cfg.weights.ablation.cfa) {
    SphereSpace space{resolved_sphere_dim(cfg, student), cfg.sphere.epsilon};
    m.cfa = CfaModule::make(specs, student, space, rng);
  }
  return m;
}

/// Loss terms of one distillation batch. `samples` are already augmented; the
/// student sees them under `target_norm`, each expert under its own statistics.
inline LossBreakdown distill_losses(const std::vector<ExpertBundle>& experts, const Backbone& student,
                                    const DistillModules& modules, const std::vector<Sample>& samples,
                                    const Normalizer& target_norm, int height, int width, const DistillConfig& cfg) {
  const auto ptrs = detail::pointers(samples);
  const auto labels = detail::labels_of(samples);
  std::vector<FeatureTaps> teacher;
  if (cfg.method != Method::supervised) {
    NoGradGuard ng;
    for (const auto& e : experts) teacher.push_back(e.model.forward_with_taps(make_batch(ptrs, height, width, e.normalizer)));
  }
  FeatureTaps taps = student.forward_with_taps(make_batch(ptrs, height, width, target_norm));
  Tensor cls = ops::cross_entropy(taps.pooled_logits, labels);

  switch (cfg.method) {
    case Method::supervised:
      return total_loss(cls, {}, {}, {}, cfg.weights);
    case Method::kd:
    case Method::dkd: {
      std::vector<Tensor> tl;
      for (const auto& t : teacher) tl.push_back(t.pooled_logits);
      Tensor kd = cfg.method == Method::kd ? kd_baseline_loss(tl, taps.pooled_logits, cfg.kd_temperature)
                                           : dkd_baseline_loss(tl, taps.pooled_logits, labels, cfg.dkd);
      auto b = total_loss(cls, {}, {}, {}, cfg.weights);
      b.kd = detail::checked_component(kd, "KD");
      b.total = ops::add(b.total, ops::scale(kd, cfg.kd_weight));
      b.total_value = b.total.item();
      return b;
    }
    case Method::umkd:
      break;
  }
  Tensor sfa, cfa, udd;
  const bool feature_on = cfg.weights.alpha != 0.0;
  if (cfg.weights.ablation.sfa && modules.sfa && feature_on) {
    std::vector<Tensor> shallow;
    for (const auto& t : teacher) shallow.push_back(t.shallow);
    sfa = sfa_loss(shallow, taps.shallow, *modules.sfa, cfg.mapping, cfg.mmd_normalization).total;
  }
  if (cfg.weights.ablation.cfa && modules.cfa && feature_on) {
    std::vector<Tensor> deep;
    for (const auto& t : teacher) deep.push_back(t.deep);
    cfa = cfa_loss(deep, taps.deep, *modules.cfa, cfg.mapping, cfg.mmd_normalization).total;
  }
  if (cfg.weights.ablation.udd && cfg.weights.beta != 0.0) {
    std::vector<LogitsMap> maps;
    for (const auto& t : teacher) maps.push_back(t.logits_map);
    udd = udd_loss(maps, taps.logits_map, cfg.scales, cfg.cell_normalization);
  }
  return total_loss(cls, sfa, cfa, udd, cfg.weights);
}

struct DistillResult {
  Backbone student;
  DistillModules modules;
  TrainRunRecord record;
};

/// Optimises the student and the alignment modules against frozen experts.
inline DistillResult distill(const std::vector<ExpertBundle>& experts, Backbone student, const DatasetSplits& data,
                             const DistillConfig& cfg) {
  cfg.validate();
  detail::require<ConfigError>(cfg.method == Method::supervised || !experts.empty(), "distill: no experts");
  const auto start = std::chrono::steady_clock::now();
  const int h = data.train.height, w = data.train.width;
  for (const auto& e : experts) {
    detail::require<ConfigError>(e.model.spec().num_classes == student.spec().num_classes,
                                 "distill: expert '" + e.name + "' class count differs from the student");
    detail::require<ConfigError>(e.model.spec().input_height == h && e.model.spec().input_width == w,
                                 "distill: expert '" + e.name + "' input resolution differs from the data");
    if (cfg.method == Method::umkd && cfg.weights.ablation.udd)
      detail::require<ConfigError>(e.model.spec().downsampling() == student.spec().downsampling(),
                                   "distill: expert '" + e.name + "' logits map size differs from the student's");
  }

  DistillModules modules = make_distill_modules(experts, student.spec(), cfg);
  DistillResult r{std::move(student), std::move(modules)};
  const Normalizer norm = Normalizer::fit(data.train);
  r.record.role = to_string(cfg.method);
  for (const auto& e : experts) {
    r.record.expert_hashes_before.push_back(e.model.weight_hash());
    detail::require<ContractViolation>(r.record.expert_hashes_before.back() == e.hash,
                                       "distill: expert '" + e.name + "' does not match its recorded hash");
  }

  // Parameter-set check: only student and alignment modules are optimised;
  // no expert tensor may be reachable from the optimiser.
  r.student.set_trainable(true);
  std::vector<Tensor> params;
  for (const auto& p : r.student.parameters()) params.push_back(p.tensor);
  for (const auto& t : r.modules.tensors()) params.push_back(t);
  std::set<const void*> trainable;
  for (const auto& p : params) {
    detail::require<ContractViolation>(p.requires_grad(), "distill: trainable tensor without grad");
    detail::require<ContractViolation>(trainable.insert(p.id()).second, "distill: tensor registered twice");
  }
  for (const auto& e : experts)
    for (const auto& p : e.model.parameters()) {
      detail::require<ContractViolation>(!p.tensor.requires_grad(),
                                         "distill: expert '" + e.name + "' parameter " + p.name + " is not frozen");
      detail::require<ContractViolation>(!trainable.count(p.tensor.id()),
                                         "distill: expert '" + e.name + "' parameter " + p.name + " is in the optimiser");
    }

  Optimizer opt(params, cfg.train.optimizer);
  std::mt19937_64 order_rng(detail::derive_seed(cfg.train.seed, 1)), aug_rng(detail::derive_seed(cfg.train.seed, 2));
  const std::int64_t steps_per_epoch =
      static_cast<std::int64_t>(detail::epoch_batches(data.train.size(), cfg.train.batch_size, order_rng).size());
  order_rng.seed(detail::derive_seed(cfg.train.seed, 1));
  const std::int64_t total_steps = steps_per_epoch * cfg.train.epochs;
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    EpochRecord er{epoch, scheduled_lr(cfg.train.optimizer, step, total_steps)};
    double norm_sum = 0.0;
    auto batches = detail::epoch_batches(data.train.size(), cfg.train.batch_size, order_rng);
    for (const auto& idx : batches) {
      auto samples = detail::gather(data.train, idx, cfg.train.augment, aug_rng);
      auto b = distill_losses(experts, r.student, r.modules, samples, norm, h, w, cfg);
      if (step == 0) detail::add_loss(r.record.initial_loss, b);
      opt.zero_grad();
      backward(b.total);
      norm_sum += opt.step(scheduled_lr(cfg.train.optimizer, step++, total_steps));
      detail::add_loss(er.loss, b);
    }
    for (auto& [k, v] : er.loss) v /= static_cast<double>(batches.size());
    er.grad_norm = norm_sum / static_cast<double>(batches.size());
    if (!data.val.samples.empty()) er.val = evaluate(r.student, data.val, norm);
    r.record.epochs.push_back(std::move(er));
  }
  r.student.set_trainable(false);

  for (const auto& e : experts) r.record.expert_hashes_after.push_back(e.model.weight_hash());
  for (std::size_t t = 0; t < experts.size(); ++t)
    detail::require<ContractViolation>(r.record.expert_hashes_before[t] == r.record.expert_hashes_after[t] &&
                                           r.record.expert_hashes_before[t] == experts[t].hash,
                                       "distill: expert '" + experts[t].name + "' weights changed");
  if (!data.test.samples.empty()) r.record.test = evaluate(r.student, data.test, norm);
  r.record.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace umkd
