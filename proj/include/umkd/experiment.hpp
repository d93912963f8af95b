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
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "umkd/checkpoint.hpp"
#include "umkd/trainer.hpp"

#ifdef UMKD_WITH_IMAGE_IO
#include "umkd/image_io.hpp"
#endif

// Config-driven experiment runner: schema validation, the run directory
// layout, per-seed summaries and cross-run comparison tables.
namespace umkd {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

/// One row of the method grid: a method plus, for UMKD, its component switches.
struct MethodEntry {
  std::string name;
  Method method = Method::umkd;
  Ablation ablation;
};

struct DatasetConfig {
  std::string type = "synthetic";  // synthetic | image_folder
  int num_classes = 4;
  int height = 32;
  int width = 32;
  double noise_level = 1.0;          // synthetic
  std::uint64_t seed = 0;            // synthetic generator and profile subsampling
  std::vector<std::string> source_roots;  // image_folder, one per expert
  std::string target_root;                // image_folder
  std::vector<int> balanced_counts;
  std::vector<int> imbalanced_counts;
  SplitConfig split;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  Protocol protocol = Protocol::sources_imbalanced;
  std::vector<BackboneSpec> experts;
  BackboneSpec student;
  TrainConfig expert_training{30, 32, {}, 0, true};
  DistillConfig distill;
  std::string output_dir = "runs/experiment";
  std::vector<std::uint64_t> seeds{0};
  std::vector<MethodEntry> methods;
  bool deterministic = true;

  ojson to_json() const;
};

// ---------------------------------------------------------------------------
// Schema

namespace detail {

class SchemaReader {
 public:
  std::vector<std::string> errors;

  /// Flags keys of `obj` outside `allowed`; returns false if `obj` is not an object.
  bool object(const ojson& obj, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) {
      errors.push_back(path + ": expected an object");
      return false;
    }
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [k, v] : obj.items())
      if (!ok.count(k)) errors.push_back(path + "." + k + ": unknown key");
    return true;
  }

  bool require(const ojson& obj, const std::string& path, const char* key) {
    if (obj.contains(key)) return true;
    errors.push_back(path + "." + key + ": required key missing");
    return false;
  }

  template <typename T>
  void read(const ojson& obj, const std::string& path, const char* key, T& out) {
    if (!obj.is_object() || !obj.contains(key)) return;
    const auto& v = obj.at(key);
    const std::string where = path + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) return fail(where, "expected a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) return fail(where, "expected an integer");
      if (std::is_unsigned_v<T> && v.get<std::int64_t>() < 0) return fail(where, "expected a non-negative integer");
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) return fail(where, "expected a number");
      out = v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) return fail(where, "expected a string");
      out = v.get<std::string>();
    } else {
      // Arrays of integers or strings.
      using E = typename T::value_type;
      if (!v.is_array()) return fail(where, "expected an array");
      T tmp;
      for (const auto& x : v) {
        if constexpr (std::is_same_v<E, std::string>) {
          if (!x.is_string()) return fail(where, "expected an array of strings");
        } else if constexpr (std::is_floating_point_v<E>) {
          if (!x.is_number()) return fail(where, "expected an array of numbers");
        } else {
          if (!x.is_number_integer()) return fail(where, "expected an array of integers");
        }
        tmp.push_back(x.get<E>());
      }
      out = std::move(tmp);
    }
  }

  template <typename E>
  void read_enum(const ojson& obj, const std::string& path, const char* key, E& out,
                 std::initializer_list<std::pair<const char*, E>> options) {
    if (!obj.is_object() || !obj.contains(key)) return;
    const std::string where = path + "." + key;
    if (!obj.at(key).is_string()) return fail(where, "expected a string");
    const auto s = obj.at(key).get<std::string>();
    std::string names;
    for (const auto& [n, e] : options) {
      if (s == n) {
        out = e;
        return;
      }
      names += std::string(names.empty() ? "" : ", ") + n;
    }
    fail(where, "'" + s + "' is not one of {" + names + "}");
  }

  void fail(const std::string& where, const std::string& what) { errors.push_back(where + ": " + what); }
};

inline void read_optimizer(SchemaReader& r, const ojson& j, const std::string& path, OptimizerConfig& o) {
  if (!r.object(j, path, {"kind", "lr", "momentum", "beta1", "beta2", "weight_decay", "schedule", "clip_grad_norm"}))
    return;
  r.read_enum(j, path, "kind", o.kind, {{"sgd", OptimizerKind::sgd}, {"adam", OptimizerKind::adam}});
  r.read(j, path, "lr", o.lr);
  r.read(j, path, "momentum", o.momentum);
  r.read(j, path, "beta1", o.beta1);
  r.read(j, path, "beta2", o.beta2);
  r.read(j, path, "weight_decay", o.weight_decay);
  r.read_enum(j, path, "schedule", o.schedule, {{"constant", LrSchedule::constant}, {"cosine", LrSchedule::cosine}});
  r.read(j, path, "clip_grad_norm", o.clip_grad_norm);
}

inline void read_training(SchemaReader& r, const ojson& j, const std::string& path, TrainConfig& t) {
  r.read(j, path, "epochs", t.epochs);
  r.read(j, path, "batch_size", t.batch_size);
  r.read(j, path, "seed", t.seed);
  r.read(j, path, "augment", t.augment);
  if (j.contains("optimizer")) read_optimizer(r, j.at("optimizer"), path + ".optimizer", t.optimizer);
}

inline BackboneSpec read_backbone(SchemaReader& r, const ojson& j, const std::string& path) {
  BackboneSpec s;
  if (!r.object(j, path, {"name", "stage_channels", "shallow_stage"})) return s;
  r.require(j, path, "name");
  r.require(j, path, "stage_channels");
  r.read(j, path, "name", s.name);
  r.read(j, path, "stage_channels", s.stage_channels);
  r.read(j, path, "shallow_stage", s.shallow_stage);
  return s;
}

inline Ablation read_ablation(SchemaReader& r, const ojson& j, const std::string& path) {
  Ablation a;
  if (!r.object(j, path, {"sfa", "cfa", "udd"})) return a;
  r.read(j, path, "sfa", a.sfa);
  r.read(j, path, "cfa", a.cfa);
  r.read(j, path, "udd", a.udd);
  return a;
}

inline std::string ablation_label(const Ablation& a) {
  std::string s;
  if (a.sfa) s += "+sfa";
  if (a.cfa) s += "+cfa";
  if (a.udd) s += "+udd";
  return s.empty() ? "cls_only" : s.substr(1);
}

}  // namespace detail

inline Method parse_method(const std::string& s) {
  if (s == "umkd") return Method::umkd;
  if (s == "kd") return Method::kd;
  if (s == "dkd") return Method::dkd;
  if (s == "supervised") return Method::supervised;
  throw ConfigError("unknown method '" + s + "' (expected umkd, kd, dkd or supervised)");
}

/// Parses and validates a config document. Every problem found is listed in
/// one ConfigError; nothing is computed before this succeeds.
inline ExperimentConfig parse_experiment_config(const ojson& j) {
  detail::SchemaReader r;
  ExperimentConfig c;
  if (!r.object(j, "config", {"dataset", "protocol", "models", "expert_training", "distill", "run"}))
    throw ConfigError("config: top level must be an object");
  for (const char* k : {"dataset", "models", "run"}) r.require(j, "config", k);

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    auto& ds = c.dataset;
    if (r.object(d, "dataset",
                 {"type", "num_classes", "resolution", "noise_level", "seed", "source_roots", "target_root",
                  "balanced_counts", "imbalanced_counts", "split"})) {
      r.read_enum(d, "dataset", "type", ds.type, {{"synthetic", std::string("synthetic")}, {"image_folder", std::string("image_folder")}});
      r.read(d, "dataset", "num_classes", ds.num_classes);
      std::vector<int> res;
      r.read(d, "dataset", "resolution", res);
      if (d.contains("resolution")) {
        if (res.size() == 2) {
          ds.height = res[0];
          ds.width = res[1];
        } else {
          r.fail("dataset.resolution", "expected [height, width]");
        }
      }
      r.read(d, "dataset", "noise_level", ds.noise_level);
      r.read(d, "dataset", "seed", ds.seed);
      r.read(d, "dataset", "source_roots", ds.source_roots);
      r.read(d, "dataset", "target_root", ds.target_root);
      r.read(d, "dataset", "balanced_counts", ds.balanced_counts);
      r.read(d, "dataset", "imbalanced_counts", ds.imbalanced_counts);
      if (d.contains("split") && r.object(d.at("split"), "dataset.split", {"ratios", "seed"})) {
        std::vector<double> ratios;
        r.read(d.at("split"), "dataset.split", "ratios", ratios);
        if (d.at("split").contains("ratios")) {
          if (ratios.size() == 3)
            ds.split.ratios = {ratios[0], ratios[1], ratios[2]};
          else
            r.fail("dataset.split.ratios", "expected three ratios");
        }
        r.read(d.at("split"), "dataset.split", "seed", ds.split.seed);
      }
      if (ds.type == "synthetic") {
        if (ds.balanced_counts.empty()) r.fail("dataset.balanced_counts", "required for synthetic data");
        if (ds.imbalanced_counts.empty()) r.fail("dataset.imbalanced_counts", "required for synthetic data");
      } else {
        if (ds.source_roots.empty()) r.fail("dataset.source_roots", "required for image_folder data");
        if (ds.target_root.empty()) r.fail("dataset.target_root", "required for image_folder data");
      }
      for (const auto* counts : {&ds.balanced_counts, &ds.imbalanced_counts})
        if (!counts->empty() && static_cast<int>(counts->size()) != ds.num_classes)
          r.fail("dataset", "class-count profiles need one entry per class");
    }
  }

  r.read_enum(j, "config", "protocol", c.protocol,
              {{"sources_imbalanced", Protocol::sources_imbalanced}, {"target_imbalanced", Protocol::target_imbalanced}});

  if (j.contains("models") && r.object(j.at("models"), "models", {"experts", "student"})) {
    const auto& m = j.at("models");
    r.require(m, "models", "experts");
    r.require(m, "models", "student");
    if (m.contains("experts")) {
      if (!m.at("experts").is_array() || m.at("experts").empty())
        r.fail("models.experts", "expected a non-empty array");
      else
        for (std::size_t i = 0; i < m.at("experts").size(); ++i)
          c.experts.push_back(detail::read_backbone(r, m.at("experts")[i], "models.experts[" + std::to_string(i) + "]"));
    }
    if (m.contains("student")) c.student = detail::read_backbone(r, m.at("student"), "models.student");
  }

  if (j.contains("expert_training")) {
    const auto& t = j.at("expert_training");
    if (r.object(t, "expert_training", {"epochs", "batch_size", "optimizer", "seed", "augment"}))
      detail::read_training(r, t, "expert_training", c.expert_training);
  }

  if (j.contains("distill")) {
    const auto& d = j.at("distill");
    auto& dc = c.distill;
    if (r.object(d, "distill",
                 {"alpha", "beta", "scales", "cell_normalization", "sfa", "sphere_dim", "mapping", "mmd_normalization",
                  "kd", "dkd", "epochs", "batch_size", "optimizer", "augment"})) {
      r.read(d, "distill", "alpha", dc.weights.alpha);
      r.read(d, "distill", "beta", dc.weights.beta);
      r.read(d, "distill", "scales", dc.scales.scales);
      r.read_enum(d, "distill", "cell_normalization", dc.cell_normalization,
                  {{"literal", CellNormalization::literal}, {"cell_mean", CellNormalization::cell_mean}});
      if (d.contains("sfa") && r.object(d.at("sfa"), "distill.sfa", {"kernel_sizes", "strides", "channels"})) {
        r.read(d.at("sfa"), "distill.sfa", "kernel_sizes", dc.sfa_kernels);
        r.read(d.at("sfa"), "distill.sfa", "strides", dc.sfa_strides);
        r.read(d.at("sfa"), "distill.sfa", "channels", dc.sfa_channels);
      }
      r.read(d, "distill", "sphere_dim", dc.sphere.dim);
      if (d.contains("mapping") &&
          r.object(d.at("mapping"), "distill.mapping", {"kind", "feature_dim", "seed", "bandwidth"})) {
        const auto& mp = d.at("mapping");
        r.read_enum(mp, "distill.mapping", "kind", dc.mapping.kind,
                    {{"identity", MappingKind::identity}, {"random_fourier", MappingKind::random_fourier}});
        r.read(mp, "distill.mapping", "feature_dim", dc.mapping.feature_dim);
        r.read(mp, "distill.mapping", "seed", dc.mapping.seed);
        r.read(mp, "distill.mapping", "bandwidth", dc.mapping.bandwidth);
      }
      r.read_enum(d, "distill", "mmd_normalization", dc.mmd_normalization,
                  {{"batch_sum", MmdNormalization::batch_sum}, {"mean_embedding", MmdNormalization::mean_embedding}});
      if (d.contains("kd") && r.object(d.at("kd"), "distill.kd", {"temperature", "weight"})) {
        r.read(d.at("kd"), "distill.kd", "temperature", dc.kd_temperature);
        r.read(d.at("kd"), "distill.kd", "weight", dc.kd_weight);
      }
      if (d.contains("dkd") && r.object(d.at("dkd"), "distill.dkd", {"alpha", "beta", "temperature"})) {
        r.read(d.at("dkd"), "distill.dkd", "alpha", dc.dkd.alpha);
        r.read(d.at("dkd"), "distill.dkd", "beta", dc.dkd.beta);
        r.read(d.at("dkd"), "distill.dkd", "temperature", dc.dkd.temperature);
      }
      detail::read_training(r, d, "distill", dc.train);
    }
  }

  if (j.contains("run")) {
    const auto& rr = j.at("run");
    if (r.object(rr, "run", {"output_dir", "seeds", "methods", "deterministic"})) {
      r.require(rr, "run", "methods");
      r.read(rr, "run", "output_dir", c.output_dir);
      r.read(rr, "run", "seeds", c.seeds);
      r.read(rr, "run", "deterministic", c.deterministic);
      if (rr.contains("methods")) {
        const auto& ms = rr.at("methods");
        if (!ms.is_array() || ms.empty()) r.fail("run.methods", "expected a non-empty array");
        for (std::size_t i = 0; ms.is_array() && i < ms.size(); ++i) {
          const std::string where = "run.methods[" + std::to_string(i) + "]";
          MethodEntry e;
          if (ms[i].is_string()) {
            e.name = ms[i].get<std::string>();
            try {
              e.method = parse_method(e.name);
            } catch (const ConfigError& err) {
              r.fail(where, err.what());
            }
          } else if (r.object(ms[i], where, {"name", "method", "ablation"})) {
            std::string method = "umkd";
            r.read(ms[i], where, "method", method);
            try {
              e.method = parse_method(method);
            } catch (const ConfigError& err) {
              r.fail(where + ".method", err.what());
            }
            if (ms[i].contains("ablation")) {
              if (e.method != Method::umkd) r.fail(where + ".ablation", "only applies to umkd");
              e.ablation = detail::read_ablation(r, ms[i].at("ablation"), where + ".ablation");
            }
            e.name = method == "umkd" && ms[i].contains("ablation") ? "umkd[" + detail::ablation_label(e.ablation) + "]"
                                                                     : method;
            r.read(ms[i], where, "name", e.name);
          }
          c.methods.push_back(e);
        }
        std::set<std::string> names;
        for (const auto& e : c.methods)
          if (!names.insert(e.name).second) r.fail("run.methods", "duplicate method name '" + e.name + "'");
      }
      if (c.seeds.empty()) r.fail("run.seeds", "expected at least one seed");
    }
  }

  if (!r.errors.empty()) {
    std::string msg = "invalid config (" + std::to_string(r.errors.size()) + " problem" +
                      (r.errors.size() == 1 ? "" : "s") + "):";
    for (const auto& e : r.errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }

  // Semantic checks once the shape is right.
  for (auto& s : c.experts) {
    s.num_classes = c.dataset.num_classes;
    s.input_height = c.dataset.height;
    s.input_width = c.dataset.width;
    s.validate();
  }
  c.student.num_classes = c.dataset.num_classes;
  c.student.input_height = c.dataset.height;
  c.student.input_width = c.dataset.width;
  c.student.validate();
  c.dataset.split.validate();
  c.expert_training.validate();
  c.distill.validate();
  if (c.dataset.type == "image_folder")
    detail::require<ConfigError>(c.dataset.source_roots.size() == c.experts.size(),
                                 "dataset.source_roots: need one root per expert (" +
                                     std::to_string(c.experts.size()) + ")");
  return c;
}

inline ExperimentConfig parse_experiment_config_text(const std::string& text) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_experiment_config(j);
}

inline std::string read_text_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot read '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError("cannot write '" + p.string() + "'");
  out << text;
}

inline ojson ExperimentConfig::to_json() const {
  auto opt = [](const OptimizerConfig& o) {
    return ojson{{"kind", o.kind == OptimizerKind::sgd ? "sgd" : "adam"},
                 {"lr", o.lr},
                 {"momentum", o.momentum},
                 {"beta1", o.beta1},
                 {"beta2", o.beta2},
                 {"weight_decay", o.weight_decay},
                 {"schedule", o.schedule == LrSchedule::cosine ? "cosine" : "constant"},
                 {"clip_grad_norm", o.clip_grad_norm}};
  };
  auto spec = [](const BackboneSpec& s) {
    return ojson{{"name", s.name}, {"stage_channels", s.stage_channels}, {"shallow_stage", s.shallow_stage}};
  };
  ojson j;
  j["dataset"] = {{"type", dataset.type},
                  {"num_classes", dataset.num_classes},
                  {"resolution", {dataset.height, dataset.width}},
                  {"noise_level", dataset.noise_level},
                  {"seed", dataset.seed},
                  {"source_roots", dataset.source_roots},
                  {"target_root", dataset.target_root},
                  {"balanced_counts", dataset.balanced_counts},
                  {"imbalanced_counts", dataset.imbalanced_counts},
                  {"split", {{"ratios", dataset.split.ratios}, {"seed", dataset.split.seed}}}};
  j["protocol"] = to_string(protocol);
  auto ex = ojson::array();
  for (const auto& e : experts) ex.push_back(spec(e));
  j["models"] = {{"experts", ex}, {"student", spec(student)}};
  j["expert_training"] = {{"epochs", expert_training.epochs},
                          {"batch_size", expert_training.batch_size},
                          {"optimizer", opt(expert_training.optimizer)},
                          {"seed", expert_training.seed},
                          {"augment", expert_training.augment}};
  const auto& d = distill;
  j["distill"] = {
      {"alpha", d.weights.alpha},
      {"beta", d.weights.beta},
      {"scales", d.scales.scales},
      {"cell_normalization", d.cell_normalization == CellNormalization::literal ? "literal" : "cell_mean"},
      {"sfa", {{"kernel_sizes", d.sfa_kernels}, {"strides", d.sfa_strides}, {"channels", d.sfa_channels}}},
      {"sphere_dim", d.sphere.dim},
      {"mapping",
       {{"kind", d.mapping.kind == MappingKind::identity ? "identity" : "random_fourier"},
        {"feature_dim", d.mapping.feature_dim},
        {"seed", d.mapping.seed},
        {"bandwidth", d.mapping.bandwidth}}},
      {"mmd_normalization", d.mmd_normalization == MmdNormalization::batch_sum ? "batch_sum" : "mean_embedding"},
      {"kd", {{"temperature", d.kd_temperature}, {"weight", d.kd_weight}}},
      {"dkd", {{"alpha", d.dkd.alpha}, {"beta", d.dkd.beta}, {"temperature", d.dkd.temperature}}},
      {"epochs", d.train.epochs},
      {"batch_size", d.train.batch_size},
      {"optimizer", opt(d.train.optimizer)},
      {"augment", d.train.augment}};
  auto ms = ojson::array();
  for (const auto& m : methods)
    ms.push_back({{"name", m.name},
                  {"method", umkd::to_string(m.method)},
                  {"ablation", {{"sfa", m.ablation.sfa}, {"cfa", m.ablation.cfa}, {"udd", m.ablation.udd}}}});
  j["run"] = {{"output_dir", output_dir}, {"seeds", seeds}, {"methods", ms}, {"deterministic", deterministic}};
  return j;
}

// ---------------------------------------------------------------------------
// Data preparation

struct ExperimentData {
  std::vector<DatasetSplits> sources;  // one per expert
  DatasetSplits target;
};

inline ExperimentData prepare_data(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  // Experts see the imbalanced profile under sources_imbalanced and the
  // balanced one otherwise; the target gets the other profile.
  const bool src_imb = c.protocol == Protocol::sources_imbalanced;
  const auto& source_counts = src_imb ? d.imbalanced_counts : d.balanced_counts;
  const auto& target_counts = src_imb ? d.balanced_counts : d.imbalanced_counts;

  auto make = [&](std::size_t index, const std::vector<int>& counts, const std::string& root,
                  const std::string& name) -> GradingDataset {
    GradingDataset ds;
    const std::uint64_t seed = d.seed + index;
    if (d.type == "synthetic") {
      SynthSpec s;
      s.num_classes = d.num_classes;
      s.counts = counts;
      s.height = d.height;
      s.width = d.width;
      s.noise_level = d.noise_level;
      s.seed = seed;
      ds = synth_grading_dataset(s);
    } else {
#ifdef UMKD_WITH_IMAGE_IO
      ds = load_image_folder(root);
      detail::require<ConfigError>(ds.num_classes == d.num_classes && ds.height == d.height && ds.width == d.width,
                                   "dataset '" + root + "' does not match the configured classes/resolution");
      if (!counts.empty()) ds = subsample_to_profile(ds, ImbalanceProfile{counts, seed});
#else
      (void)root;
      throw ConfigError("image_folder datasets need a build with image I/O");
#endif
    }
    ds.name = name;
    return ds;
  };

  ExperimentData out;
  // The target takes generator seed d.seed, source t takes d.seed + 1 + t.
  SplitConfig sc = d.split;
  out.target = split(make(0, target_counts, d.target_root, "target"), sc);
  for (std::size_t t = 0; t < c.experts.size(); ++t) {
    sc.seed = d.split.seed + 1 + t;
    out.sources.push_back(split(make(1 + t, source_counts, t < d.source_roots.size() ? d.source_roots[t] : "",
                                     "source_" + std::to_string(t)),
                                sc));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Runs

struct MethodSummary {
  std::string name;
  std::string method;
  std::map<std::uint64_t, MetricsReport> per_seed;
};

inline double median(std::vector<double> v) {
  detail::require(!v.empty(), "median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace detail {

inline ojson headline(const MetricsReport& m) {
  auto j = metrics_to_json(m);
  return {{"oa", j["oa"]}, {"macc", j["macc"]}, {"f1", j["weighted_f1"]}, {"mae", j["mae"]}};
}

inline std::string fmt(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace detail

inline ojson summary_json(const ExperimentConfig& c, const std::vector<MethodSummary>& methods,
                          const std::vector<ExpertBundle>& experts) {
  ojson j;
  j["protocol"] = to_string(c.protocol);
  j["seeds"] = c.seeds;
  auto ex = ojson::array();
  for (const auto& e : experts)
    ex.push_back({{"name", e.name}, {"hash", detail::hex64(e.hash)}, {"source_test", detail::headline(e.record.test)}});
  j["experts"] = ex;
  auto arr = ojson::array();
  for (const auto& m : methods) {
    ojson per = ojson::object();
    std::map<std::string, std::vector<double>> cols;
    for (const auto& [seed, rep] : m.per_seed) {
      auto h = detail::headline(rep);
      per[std::to_string(seed)] = h;
      for (const auto& [k, v] : h.items()) cols[k].push_back(v.get<double>());
    }
    ojson med;
    for (const char* k : {"oa", "macc", "f1", "mae"}) med[k] = median(cols[k]);
    arr.push_back({{"name", m.name}, {"method", m.method}, {"per_seed", per}, {"median", med}});
  }
  j["methods"] = arr;
  return j;
}

inline std::string summary_markdown(const ojson& s) {
  std::ostringstream md;
  md << "# Summary (" << s["protocol"].get<std::string>() << ")\n\n";
  md << "| method | seed | OA | mAcc | F1 | MAE |\n|---|---|---|---|---|---|\n";
  for (const auto& m : s["methods"]) {
    for (const auto& [seed, h] : m["per_seed"].items())
      md << "| " << m["name"].get<std::string>() << " | " << seed << " | " << detail::fmt(h["oa"], 2) << " | "
         << detail::fmt(h["macc"], 2) << " | " << detail::fmt(h["f1"], 2) << " | " << detail::fmt(h["mae"], 4)
         << " |\n";
    const auto& med = m["median"];
    md << "| " << m["name"].get<std::string>() << " | median | " << detail::fmt(med["oa"], 2) << " | "
       << detail::fmt(med["macc"], 2) << " | " << detail::fmt(med["f1"], 2) << " | " << detail::fmt(med["mae"], 4)
       << " |\n";
  }
  return md.str();
}

/// Resolves the output directory against $UMKD_OUTPUT_ROOT when it is relative.
inline fs::path resolve_output_dir(const std::string& dir) {
  fs::path p(dir);
  if (p.is_relative())
    if (const char* root = std::getenv("UMKD_OUTPUT_ROOT"); root && *root) return fs::path(root) / p;
  return p;
}

struct RunOptions {
  bool dry_run = false;
  bool overwrite = false;
  std::optional<std::uint64_t> seed_override;
  std::ostream* log = &std::cerr;
};

/// Planned stages, one line each, without doing any work.
inline std::vector<std::string> planned_stages(const ExperimentConfig& c) {
  std::vector<std::string> s;
  for (const auto& e : c.experts) s.push_back("train expert " + e.name);
  for (auto seed : c.seeds)
    for (const auto& m : c.methods) s.push_back("seed " + std::to_string(seed) + ": distill " + m.name);
  s.push_back("write summary");
  return s;
}

struct RunResult {
  fs::path dir;
  ojson summary;
};

/// Executes the configured workflow. `config_text` is echoed byte-for-byte.
inline RunResult run_experiment(const std::string& config_text, const RunOptions& opt = {}) {
  ExperimentConfig c = parse_experiment_config_text(config_text);
  if (opt.seed_override) c.seeds = {*opt.seed_override};
  auto& log = *opt.log;
  RunResult res{resolve_output_dir(c.output_dir), {}};
  if (opt.dry_run) {
    log << c.to_json().dump(2) << "\n";
    for (const auto& s : planned_stages(c)) log << "plan: " << s << "\n";
    return res;
  }
  const fs::path dir = res.dir;
  if (fs::exists(dir / "STATUS")) {
    if (!opt.overwrite)
      throw ConfigError("output directory '" + dir.string() + "' already holds a run (pass --overwrite)");
    fs::remove_all(dir);  // only ever a previous run directory, marked by its STATUS file
  }
  fs::create_directories(dir);
  write_text_file(dir / "STATUS", "incomplete\n");
  try {
    write_text_file(dir / "config.json", config_text);
    write_text_file(dir / "resolved_config.json", c.to_json().dump(2) + "\n");

    const auto data = prepare_data(c);
    write_text_file(dir / "manifests" / "target.json", ojson{{"train", dataset_manifest(data.target.train)},
                                                             {"val", dataset_manifest(data.target.val)},
                                                             {"test", dataset_manifest(data.target.test)}}
                                                           .dump(2) + "\n");

    std::vector<ExpertBundle> experts;
    for (std::size_t t = 0; t < c.experts.size(); ++t) {
      const auto& src = data.sources[t];
      write_text_file(dir / "manifests" / ("source_" + std::to_string(t) + ".json"),
                      ojson{{"train", dataset_manifest(src.train)},
                            {"val", dataset_manifest(src.val)},
                            {"test", dataset_manifest(src.test)}}
                              .dump(2) + "\n");
      TrainConfig tc = c.expert_training;
      tc.seed = c.expert_training.seed + t;
      log << "training expert " << c.experts[t].name << std::endl;
      experts.push_back(train_expert(c.experts[t].name, c.experts[t], src, tc, detail::derive_seed(tc.seed, 100)));
      experts.back().record.config = c.to_json()["expert_training"];
      const fs::path edir = dir / "experts" / c.experts[t].name;
      fs::create_directories(edir);
      save_backbone(edir / "expert.ckpt", experts.back().model,
                    {{"normalizer", experts.back().normalizer.to_json()}, {"hash", detail::hex64(experts.back().hash)}});
      write_text_file(edir / "record.json", experts.back().record.to_json().dump(2) + "\n");
    }

    std::vector<MethodSummary> summaries;
    for (const auto& m : c.methods) summaries.push_back({m.name, to_string(m.method), {}});
    for (auto seed : c.seeds) {
      for (std::size_t k = 0; k < c.methods.size(); ++k) {
        const auto& m = c.methods[k];
        DistillConfig dc = c.distill;
        dc.method = m.method;
        dc.protocol = c.protocol;
        dc.weights.ablation = m.ablation;
        dc.train.seed = seed;
        log << "seed " << seed << ": " << m.name << std::endl;
        auto r = distill(m.method == Method::supervised ? std::vector<ExpertBundle>{} : experts,
                         Backbone(c.student, detail::derive_seed(seed, 200)), data.target, dc);
        auto cfg = c.to_json()["distill"];
        cfg["method"] = m.name;
        cfg["seed"] = seed;
        r.record.config = cfg;
        const fs::path mdir = dir / ("seed_" + std::to_string(seed)) / m.name;
        fs::create_directories(mdir);
        write_text_file(mdir / "record.json", r.record.to_json().dump(2) + "\n");
        write_text_file(mdir / "metrics.json", metrics_to_json(r.record.test).dump(2) + "\n");
        save_backbone(mdir / "student.ckpt", r.student);
        summaries[k].per_seed[seed] = r.record.test;
      }
    }
    res.summary = summary_json(c, summaries, experts);
    write_text_file(dir / "summary.json", res.summary.dump(2) + "\n");
    write_text_file(dir / "summary.md", summary_markdown(res.summary));
    write_text_file(dir / "STATUS", "complete\n");
  } catch (const std::exception& e) {
    write_text_file(dir / "STATUS", std::string("incomplete\nerror: ") + e.what() + "\n");
    throw;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Comparison

struct ComparisonRow {
  std::string label;
  std::string protocol;
  std::string method;
  std::array<double, 4> values{};  // OA, mAcc, F1, MAE medians
};

struct DeltaRow {
  std::string protocol;
  std::string candidate;
  std::string baseline;
  std::array<double, 4> delta{};
};

struct Comparison {
  std::vector<ComparisonRow> rows;
  std::vector<DeltaRow> deltas;
  std::vector<std::string> warnings;

  ojson to_json() const;
  std::string to_markdown() const;
};

inline constexpr std::array<const char*, 4> kColumns{"OA", "mAcc", "F1", "MAE"};
inline constexpr std::array<bool, 4> kHigherIsBetter{true, true, true, false};

namespace detail {

inline bool better(double a, double b, int col) { return kHigherIsBetter[static_cast<std::size_t>(col)] ? a > b : a < b; }

}  // namespace detail

/// Within each protocol, the candidate is the best-mAcc full UMKD row (or
/// the first row if there is none); the strongest baseline is the best-mAcc
/// row among the other methods, or among the remaining rows when every row
/// uses the candidate's method.
inline Comparison compare_runs(const std::vector<fs::path>& dirs) {
  Comparison cmp;
  for (const auto& d : dirs) {
    std::string status;
    try {
      status = read_text_file(d / "STATUS");
    } catch (const InputError&) {
      status = "missing";
    }
    if (status.rfind("complete", 0) != 0) {
      cmp.warnings.push_back("excluding '" + d.string() + "': run is not complete");
      continue;
    }
    const auto s = ojson::parse(read_text_file(d / "summary.json"));
    const std::string run = d.filename().empty() ? d.parent_path().filename().string() : d.filename().string();
    for (const auto& m : s["methods"]) {
      ComparisonRow r{run + ":" + m["name"].get<std::string>(), s["protocol"], m["name"]};
      const auto& med = m["median"];
      r.values = {med["oa"].get<double>(), med["macc"].get<double>(), med["f1"].get<double>(), med["mae"].get<double>()};
      cmp.rows.push_back(r);
    }
  }
  if (cmp.rows.size() < 2)
    throw InputError("compare: need at least two completed method rows, found " + std::to_string(cmp.rows.size()));

  std::vector<std::string> protocols;
  for (const auto& r : cmp.rows)
    if (std::find(protocols.begin(), protocols.end(), r.protocol) == protocols.end()) protocols.push_back(r.protocol);
  for (const auto& p : protocols) {
    std::vector<const ComparisonRow*> group;
    for (const auto& r : cmp.rows)
      if (r.protocol == p) group.push_back(&r);
    if (group.size() < 2) continue;
    const ComparisonRow* cand = nullptr;
    for (const auto* r : group)
      if (r->method == "umkd" && (!cand || r->values[1] > cand->values[1])) cand = r;
    if (!cand) cand = group.front();
    bool other_methods = false;
    for (const auto* r : group) other_methods = other_methods || r->method != cand->method;
    const ComparisonRow* base = nullptr;
    for (const auto* r : group) {
      if (r == cand || (other_methods && r->method == cand->method)) continue;
      if (!base || r->values[1] > base->values[1]) base = r;
    }
    DeltaRow dr{p, cand->label, base->label};
    for (int i = 0; i < 4; ++i) dr.delta[static_cast<std::size_t>(i)] = cand->values[static_cast<std::size_t>(i)] - base->values[static_cast<std::size_t>(i)];
    cmp.deltas.push_back(dr);
  }
  return cmp;
}

inline ojson Comparison::to_json() const {
  ojson j;
  auto rs = ojson::array();
  for (const auto& r : rows)
    rs.push_back({{"label", r.label}, {"protocol", r.protocol}, {"method", r.method},
                  {"oa", r.values[0]}, {"macc", r.values[1]}, {"f1", r.values[2]}, {"mae", r.values[3]}});
  j["rows"] = rs;
  auto ds = ojson::array();
  for (const auto& d : deltas)
    ds.push_back({{"protocol", d.protocol}, {"candidate", d.candidate}, {"baseline", d.baseline},
                  {"oa", d.delta[0]}, {"macc", d.delta[1]}, {"f1", d.delta[2]}, {"mae", d.delta[3]}});
  j["delta"] = ds;
  j["warnings"] = warnings;
  return j;
}

inline std::string Comparison::to_markdown() const {
  std::ostringstream md;
  md << "| run | protocol | OA↑ | mAcc↑ | F1↑ | MAE↓ |\n|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    md << "| " << r.label << " | " << r.protocol;
    for (int c = 0; c < 4; ++c) {
      bool best = true;
      for (const auto& o : rows)
        if (o.protocol == r.protocol && detail::better(o.values[static_cast<std::size_t>(c)], r.values[static_cast<std::size_t>(c)], c)) best = false;
      const std::string v = detail::fmt(r.values[static_cast<std::size_t>(c)], c == 3 ? 4 : 2);
      md << " | " << (best ? "**" + v + "**" : v);
    }
    md << " |\n";
  }
  for (const auto& d : deltas) {
    md << "| Δ " << d.candidate << " vs " << d.baseline << " | " << d.protocol;
    for (int c = 0; c < 4; ++c) {
      const double v = d.delta[static_cast<std::size_t>(c)];
      md << " | " << (v > 0 ? "+" : "") << detail::fmt(v, c == 3 ? 4 : 2);
    }
    md << " |\n";
  }
  return md.str();
}

}  // namespace umkd
