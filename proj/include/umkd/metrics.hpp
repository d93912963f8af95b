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

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "umkd/error.hpp"

namespace umkd {

/// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes)
      : c_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
    detail::require(num_classes >= 2, "ConfusionMatrix: need at least two classes");
  }

  void add(int label, int pred) {
    detail::require(label >= 0 && label < c_ && pred >= 0 && pred < c_,
                    "ConfusionMatrix: label " + std::to_string(label) + " / prediction " + std::to_string(pred) +
                        " out of range");
    ++counts_[static_cast<std::size_t>(label) * c_ + pred];
  }

  int num_classes() const { return c_; }
  std::int64_t at(int label, int pred) const { return counts_[static_cast<std::size_t>(label) * c_ + pred]; }

  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto v : counts_) t += v;
    return t;
  }
  std::int64_t support(int label) const {
    std::int64_t s = 0;
    for (int p = 0; p < c_; ++p) s += at(label, p);
    return s;
  }
  std::int64_t predicted(int pred) const {
    std::int64_t s = 0;
    for (int l = 0; l < c_; ++l) s += at(l, pred);
    return s;
  }

  std::vector<std::vector<std::int64_t>> rows() const {
    std::vector<std::vector<std::int64_t>> r(static_cast<std::size_t>(c_));
    for (int l = 0; l < c_; ++l)
      for (int p = 0; p < c_; ++p) r[static_cast<std::size_t>(l)].push_back(at(l, p));
    return r;
  }

 private:
  int c_;
  std::vector<std::int64_t> counts_;
};

struct MetricsReport {
  double oa = 0.0;
  double macc = 0.0;
  double weighted_f1 = 0.0;
  double mae = 0.0;
  std::vector<double> per_class_recall;  // NaN for classes without support
  std::vector<int> excluded_classes;     // zero support: left out of mAcc
  std::vector<int> undefined_f1_classes; // precision or recall undefined: F1 taken as 0
  std::int64_t n = 0;
  ConfusionMatrix confusion{2};
};

/// OA, macro recall (mAcc), support-weighted F1 and ordinal MAE.
inline MetricsReport metrics_from_confusion(const ConfusionMatrix& cm, double abs_error_sum) {
  MetricsReport r;
  r.confusion = cm;
  r.n = cm.total();
  detail::require(r.n >= 1, "compute_metrics: empty input");
  const int c = cm.num_classes();
  std::int64_t correct = 0;
  double recall_sum = 0.0;
  int recall_count = 0;
  double f1_weighted = 0.0;
  for (int k = 0; k < c; ++k) {
    const std::int64_t tp = cm.at(k, k);
    const std::int64_t sup = cm.support(k);
    const std::int64_t pred = cm.predicted(k);
    correct += tp;
    if (sup > 0) {
      const double rec = static_cast<double>(tp) / static_cast<double>(sup);
      r.per_class_recall.push_back(rec);
      recall_sum += rec;
      ++recall_count;
    } else {
      r.per_class_recall.push_back(std::nan(""));
      r.excluded_classes.push_back(k);
    }
    const double f1 = tp > 0 ? 2.0 * static_cast<double>(tp) / static_cast<double>(sup + pred) : 0.0;
    if (sup == 0 || pred == 0) r.undefined_f1_classes.push_back(k);
    f1_weighted += static_cast<double>(sup) * f1;
  }
  r.oa = static_cast<double>(correct) / static_cast<double>(r.n);
  r.macc = recall_sum / recall_count;
  r.weighted_f1 = f1_weighted / static_cast<double>(r.n);
  r.mae = abs_error_sum / static_cast<double>(r.n);
  return r;
}

inline MetricsReport compute_metrics(const std::vector<int>& preds, const std::vector<int>& labels, int num_classes) {
  detail::require(!preds.empty(), "compute_metrics: empty input");
  detail::require(preds.size() == labels.size(), "compute_metrics: " + std::to_string(preds.size()) +
                                                     " predictions for " + std::to_string(labels.size()) + " labels");
  ConfusionMatrix cm(num_classes);
  double abs_err = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    cm.add(labels[i], preds[i]);
    abs_err += std::abs(preds[i] - labels[i]);
  }
  return metrics_from_confusion(cm, abs_err);
}

namespace detail {

inline double round_to(double v, int decimals) {
  const double f = std::pow(10.0, decimals);
  return std::round(v * f) / f;
}

}  // namespace detail

/// Serialized report: oa / macc / weighted_f1 in percent with two decimals,
/// MAE as a raw grade distance with four decimals.
inline nlohmann::ordered_json metrics_to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["oa"] = detail::round_to(100.0 * r.oa, 2);
  j["macc"] = detail::round_to(100.0 * r.macc, 2);
  j["weighted_f1"] = detail::round_to(100.0 * r.weighted_f1, 2);
  j["mae"] = detail::round_to(r.mae, 4);
  j["n"] = r.n;
  auto recalls = nlohmann::ordered_json::array();
  for (double v : r.per_class_recall) {
    if (std::isnan(v))
      recalls.push_back(nullptr);
    else
      recalls.push_back(detail::round_to(100.0 * v, 2));
  }
  j["per_class_recall"] = recalls;
  j["excluded_classes"] = r.excluded_classes;
  j["undefined_f1_classes"] = r.undefined_f1_classes;
  j["confusion"] = r.confusion.rows();
  return j;
}

}  // namespace umkd
