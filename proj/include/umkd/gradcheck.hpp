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
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "umkd/backbone.hpp"

// Central finite-difference oracle for analytic gradients. The numeric side
// only ever evaluates the forward function.
namespace umkd::gradcheck {

struct ParamError {
  std::string param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::string op;
  double epsilon = 1e-3;
  double threshold = 1e-4;
  double max_rel_error = 0.0;
  std::vector<ParamError> params;
  bool passed = false;
  std::string failure;  // set when an evaluation was non-finite

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["op"] = op;
    j["epsilon"] = epsilon;
    j["threshold"] = threshold;
    j["max_rel_error"] = max_rel_error;
    j["passed"] = passed;
    if (!failure.empty()) j["failure"] = failure;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& p : params)
      arr.push_back({{"param", p.param},
                     {"worst_index", p.worst_index},
                     {"analytic", p.analytic},
                     {"numeric", p.numeric},
                     {"max_rel_error", p.max_rel_error}});
    j["params"] = arr;
    return j;
  }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Scalar function of a flat point with a caller-supplied analytic gradient.
inline GradCheckReport check(const std::string& op, const std::function<double(std::span<const double>)>& f,
                             const std::function<std::vector<double>(std::span<const double>)>& grad,
                             std::vector<double> x, double epsilon = 1e-3, double threshold = 1e-4) {
  GradCheckReport r{op, epsilon, threshold};
  const std::vector<double> analytic = grad(x);
  ParamError pe{"x"};
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + epsilon;
    const double fp = f(x);
    x[i] = orig - epsilon;
    const double fm = f(x);
    x[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      r.failure = "non-finite evaluation at coordinate " + std::to_string(i);
      r.params.push_back(pe);
      return r;
    }
    const double numeric = (fp - fm) / (2.0 * epsilon);
    const double e = relative_error(analytic[i], numeric);
    if (e >= pe.max_rel_error) pe = {"x", i, analytic[i], numeric, e};
  }
  r.params.push_back(pe);
  r.max_rel_error = pe.max_rel_error;
  r.passed = r.max_rel_error <= threshold;
  return r;
}

/// Checks d(build())/d(input) for every leaf in `inputs`; `build` must
/// recompute the scalar loss from the current contents of those leaves.
inline GradCheckReport check(const std::string& op, const std::vector<NamedParam>& inputs,
                             const std::function<Tensor()>& build, double epsilon = 1e-3, double threshold = 1e-4) {
  GradCheckReport r{op, epsilon, threshold};
  std::vector<Tensor> leaves;
  for (const auto& in : inputs) {
    Tensor t = in.tensor;
    t.set_requires_grad(true);
    t.zero_grad();
    leaves.push_back(t);
  }
  {
    Tensor loss = build();
    backward(loss);
  }
  auto eval = [&]() {
    NoGradGuard ng;
    return build().item();
  };
  for (std::size_t p = 0; p < leaves.size(); ++p) {
    Tensor& leaf = leaves[p];
    const std::vector<double> analytic = leaf.grad();
    ParamError pe{inputs[p].name};
    auto data = leaf.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + epsilon;
      const double fp = eval();
      data[i] = orig - epsilon;
      const double fm = eval();
      data[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        r.failure = "non-finite evaluation at " + inputs[p].name + "[" + std::to_string(i) + "]";
        r.params.push_back(pe);
        return r;
      }
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double e = relative_error(analytic[i], numeric);
      if (e >= pe.max_rel_error) pe = {inputs[p].name, i, analytic[i], numeric, e};
    }
    r.max_rel_error = std::max(r.max_rel_error, pe.max_rel_error);
    r.params.push_back(pe);
    leaf.zero_grad();
  }
  r.passed = r.max_rel_error <= threshold;
  return r;
}

}  // namespace umkd::gradcheck
