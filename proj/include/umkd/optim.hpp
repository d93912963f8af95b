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
#include <numbers>
#include <string>
#include <vector>

#include "umkd/tensor.hpp"

namespace umkd {

enum class OptimizerKind { sgd, adam };
enum class LrSchedule { constant, cosine };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double lr = 0.01;
  double momentum = 0.9;       // sgd
  double beta1 = 0.9;          // adam
  double beta2 = 0.999;        // adam
  double weight_decay = 5e-4;
  LrSchedule schedule = LrSchedule::cosine;
  double clip_grad_norm = 0.0; // 0 disables clipping

  void validate() const {
    detail::require<ConfigError>(lr > 0.0 && std::isfinite(lr), "optimizer: lr must be > 0");
    detail::require<ConfigError>(momentum >= 0.0 && momentum < 1.0, "optimizer: momentum must be in [0, 1)");
    detail::require<ConfigError>(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
                                 "optimizer: adam betas must be in [0, 1)");
    detail::require<ConfigError>(weight_decay >= 0.0, "optimizer: weight_decay must be >= 0");
    detail::require<ConfigError>(clip_grad_norm >= 0.0, "optimizer: clip_grad_norm must be >= 0");
  }
};

/// Learning rate at `step` of `total_steps` (cosine decays to zero at the end).
inline double scheduled_lr(const OptimizerConfig& cfg, std::int64_t step, std::int64_t total_steps) {
  if (cfg.schedule == LrSchedule::constant || total_steps <= 0) return cfg.lr;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * std::min(1.0, t)));
}

/// Updates a fixed list of leaf tensors in place from their accumulated grads.
class Optimizer {
 public:
  Optimizer(std::vector<Tensor> params, OptimizerConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    for (const auto& p : params_) {
      detail::require<ContractViolation>(p.requires_grad(), "Optimizer: parameter does not require grad");
      m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
      if (cfg_.kind == OptimizerKind::adam) v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    }
  }

  const std::vector<Tensor>& params() const { return params_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Global L2 norm of the current gradients.
  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_)
      for (double g : p.grad()) s += g * g;
    return std::sqrt(s);
  }

  /// One update at learning rate `lr`; returns the pre-clipping gradient norm.
  double step(double lr) {
    const double norm = grad_norm();
    detail::require<NumericError>(std::isfinite(norm), "Optimizer: non-finite gradient");
    const double clip = (cfg_.clip_grad_norm > 0.0 && norm > cfg_.clip_grad_norm) ? cfg_.clip_grad_norm / norm : 1.0;
    ++t_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      const std::vector<double> g = p.grad();
      auto w = p.data();
      auto& m = m_[i];
      if (cfg_.kind == OptimizerKind::sgd) {
        for (std::size_t k = 0; k < w.size(); ++k) {
          const double gk = clip * g[k] + cfg_.weight_decay * w[k];
          m[k] = cfg_.momentum * m[k] + gk;
          w[k] -= lr * m[k];
        }
      } else {
        auto& v = v_[i];
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < w.size(); ++k) {
          const double gk = clip * g[k];
          m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
          v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
          // Decoupled weight decay.
          w[k] -= lr * (m[k] / bc1 / (std::sqrt(v[k] / bc2) + 1e-8) + cfg_.weight_decay * w[k]);
        }
      }
    }
    return norm;
  }

 private:
  std::vector<Tensor> params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace umkd
