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
#include <string>
#include <vector>

#include "umkd/ops.hpp"

// Logit-distillation baselines used by the comparison harness.
namespace umkd {

namespace detail {

inline void check_logit_pair(const Tensor& t, const Tensor& s, const char* op) {
  require(t.rank() == 2 && t.shape() == s.shape(),
          std::string(op) + ": teacher " + shape_str(t.shape()) + " vs student " + shape_str(s.shape()));
  for (double v : t.values()) require<NumericError>(std::isfinite(v), std::string(op) + ": non-finite teacher logit");
  for (double v : s.values()) require<NumericError>(std::isfinite(v), std::string(op) + ": non-finite student logit");
}

inline Tensor checked_scalar(Tensor t, const char* op) {
  require<NumericError>(std::isfinite(t.item()), std::string(op) + ": non-finite loss");
  return t;
}

}  // namespace detail

/// Temperature-scaled KD: tau^2 * mean_b KL(softmax(t / tau) || softmax(s / tau)).
inline Tensor kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature) {
  detail::check_logit_pair(teacher_logits, student_logits, "kd_loss");
  detail::require(temperature > 0.0, "kd_loss: temperature must be positive");
  Tensor lt = ops::log_softmax_rows(ops::scale(teacher_logits.detach(), 1.0 / temperature));
  Tensor ls = ops::log_softmax_rows(ops::scale(student_logits, 1.0 / temperature));
  Tensor kl = ops::sum(ops::mul(ops::exp(lt), ops::sub(lt, ls)));
  const double b = teacher_logits.dim(0);
  return detail::checked_scalar(ops::scale(kl, temperature * temperature / b), "kd_loss");
}

/// KD averaged over several teachers.
inline Tensor kd_baseline_loss(const std::vector<Tensor>& teacher_logits, const Tensor& student_logits,
                               double temperature) {
  detail::require(!teacher_logits.empty(), "kd_baseline_loss: no teachers");
  Tensor total;
  for (const auto& t : teacher_logits) {
    Tensor term = kd_loss(t, student_logits, temperature);
    total = total.defined() ? ops::add(total, term) : term;
  }
  return ops::scale(total, 1.0 / static_cast<double>(teacher_logits.size()));
}

struct DkdWeights {
  double alpha = 1.0;        // target-class term
  double beta = 8.0;         // non-target term
  double temperature = 4.0;
};

/// Decoupled KD: alpha * TCKD + beta * NCKD, both scaled by tau^2 and
/// averaged over the batch. TCKD is the KL between binary (target, rest)
/// distributions; NCKD is the KL between the distributions over non-target
/// classes renormalised without the target.
inline Tensor dkd_loss(const Tensor& teacher_logits, const Tensor& student_logits, const std::vector<int>& labels,
                       const DkdWeights& weights) {
  detail::check_logit_pair(teacher_logits, student_logits, "dkd_loss");
  detail::require(weights.temperature > 0.0, "dkd_loss: temperature must be positive");
  const int b = teacher_logits.dim(0), c = teacher_logits.dim(1);
  detail::require(static_cast<int>(labels.size()) == b, "dkd_loss: label count mismatch");
  std::vector<double> onehot(static_cast<std::size_t>(b) * c, 0.0);
  for (int i = 0; i < b; ++i) {
    detail::require(labels[i] >= 0 && labels[i] < c, "dkd_loss: label out of range");
    onehot[static_cast<std::size_t>(i) * c + labels[i]] = 1.0;
  }
  Tensor gt({b, c}, onehot);
  // Large negative shift on the target logit removes it from the non-target softmax.
  std::vector<double> mask_shift(onehot);
  for (auto& v : mask_shift) v *= -1000.0;
  Tensor shift({b, c}, std::move(mask_shift));

  const double inv_t = 1.0 / weights.temperature;
  Tensor zt = ops::scale(teacher_logits.detach(), inv_t);
  Tensor zs = ops::scale(student_logits, inv_t);

  // TCKD on (p_target, 1 - p_target).
  Tensor pt = ops::row_sum(ops::mul(ops::softmax_rows(zt), gt));
  Tensor ps = ops::row_sum(ops::mul(ops::softmax_rows(zs), gt));
  Tensor qt = ops::add_scalar(ops::scale(pt, -1.0), 1.0);
  Tensor qs = ops::add_scalar(ops::scale(ps, -1.0), 1.0);
  Tensor tckd = ops::sum(ops::add(ops::mul(pt, ops::sub(ops::log(pt), ops::log(ps))),
                                  ops::mul(qt, ops::sub(ops::log(qt), ops::log(qs)))));

  // NCKD on the renormalised non-target distributions.
  Tensor lt = ops::log_softmax_rows(ops::add(zt, shift));
  Tensor ls = ops::log_softmax_rows(ops::add(zs, shift));
  Tensor nckd = ops::sum(ops::mul(ops::exp(lt), ops::sub(lt, ls)));

  const double factor = weights.temperature * weights.temperature / b;
  Tensor total = ops::add(ops::scale(tckd, weights.alpha * factor), ops::scale(nckd, weights.beta * factor));
  return detail::checked_scalar(total, "dkd_loss");
}

/// DKD averaged over several teachers.
inline Tensor dkd_baseline_loss(const std::vector<Tensor>& teacher_logits, const Tensor& student_logits,
                                const std::vector<int>& labels, const DkdWeights& weights) {
  detail::require(!teacher_logits.empty(), "dkd_baseline_loss: no teachers");
  Tensor total;
  for (const auto& t : teacher_logits) {
    Tensor term = dkd_loss(t, student_logits, labels, weights);
    total = total.defined() ? ops::add(total, term) : term;
  }
  return ops::scale(total, 1.0 / static_cast<double>(teacher_logits.size()));
}

}  // namespace umkd
