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
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "umkd/ops.hpp"

namespace umkd {

/// Affine map applied to [B, D] rows or, position-wise, to [B, D, H, W] maps
/// (the 1x1-convolution equivalent). Bias is optional.
struct AffineMap {
  Tensor weight;  // [Out, In]
  Tensor bias;    // [Out] or undefined

  int in_dim() const { return weight.dim(1); }
  int out_dim() const { return weight.dim(0); }

  Tensor apply(const Tensor& x) const {
    if (x.rank() == 2) return ops::linear(x, weight, bias);
    detail::require(x.rank() == 4, "AffineMap: expected [B, D] or [B, D, H, W], got " + shape_str(x.shape()));
    detail::require(x.dim(1) == in_dim(), "AffineMap: expects " + std::to_string(in_dim()) + " channels, got " +
                                              std::to_string(x.dim(1)));
    return ops::conv2d(x, ops::reshape(weight, {out_dim(), in_dim(), 1, 1}), bias, 1, 0);
  }

  template <typename Rng>
  static AffineMap random(int in, int out, Rng& rng, bool with_bias) {
    AffineMap m;
    m.weight = Tensor::randn({out, in}, rng, 1.0 / std::sqrt(static_cast<double>(in)), true);
    if (with_bias) m.bias = Tensor::zeros({out}, true);
    return m;
  }

  /// Identity when in == out; otherwise the leading min(in, out) diagonal.
  static AffineMap identity(int in, int out, bool with_bias) {
    AffineMap m;
    m.weight = Tensor::zeros({out, in}, true);
    for (int i = 0; i < std::min(in, out); ++i) m.weight.data()[static_cast<std::size_t>(i) * in + i] = 1.0;
    if (with_bias) m.bias = Tensor::zeros({out}, true);
    return m;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> t{weight};
    if (bias.defined()) t.push_back(bias);
    return t;
  }
};

/// Trainable encoder/decoder attached to one frozen expert. The projector
/// produces the aligned features; the decoder maps them back so the
/// reconstruction loss can check nothing was lost.
struct ProjectionPair {
  AffineMap projector;
  AffineMap decoder;
};

enum class MappingKind { identity, random_fourier };

/// Explicit feature map applied before batch sums in the MMD.
struct MappingSpec {
  MappingKind kind = MappingKind::identity;
  int feature_dim = 256;     // random-fourier only
  std::uint64_t seed = 0;    // random-fourier only
  double bandwidth = 1.0;    // random-fourier only

  void validate() const {
    detail::require<ConfigError>(feature_dim >= 1, "MappingSpec: feature_dim must be >= 1");
    detail::require<ConfigError>(bandwidth > 0.0 && std::isfinite(bandwidth), "MappingSpec: bandwidth must be > 0");
  }
};

/// How the batch-level embeddings inside the MMD norm are normalised.
/// `batch_sum`: (1/B) * || sum_i phi(x_i) - sum_j phi(y_j) ||^2, summed over experts.
/// `mean_embedding`: || mean phi(x) - mean phi(y) ||^2, summed over experts.
enum class MmdNormalization { batch_sum, mean_embedding };

/// phi(x) = sqrt(2/D') cos(x Omega^T / bandwidth + b), Omega ~ N(0, 1), b ~ U[0, 2 pi).
/// Approximates a Gaussian kernel of the given bandwidth.
inline Tensor apply_mapping(const Tensor& x, const MappingSpec& spec) {
  if (spec.kind == MappingKind::identity) return x;
  spec.validate();
  const int in = x.dim(1);
  std::mt19937_64 rng(spec.seed);
  Tensor omega = Tensor::randn({spec.feature_dim, in}, rng, 1.0 / spec.bandwidth);
  Tensor phase = Tensor::uniform({spec.feature_dim}, rng, 0.0, 2.0 * std::numbers::pi);
  return ops::scale(ops::cos(ops::linear(x, omega, phase)), std::sqrt(2.0 / spec.feature_dim));
}

/// Batch-sum MMD between each expert's projected features and the student's.
/// All inputs are [B, D] with a shared B and D.
inline Tensor mmd_loss(const std::vector<Tensor>& expert_feats, const Tensor& student_feat,
                       const MappingSpec& mapping = {}, MmdNormalization norm = MmdNormalization::batch_sum) {
  detail::require(!expert_feats.empty(), "mmd_loss: expert list is empty");
  detail::require(student_feat.rank() == 2, "mmd_loss: student features must be [B, D], got " +
                                                shape_str(student_feat.shape()));
  for (const auto& e : expert_feats)
    detail::require(e.shape() == student_feat.shape(), "mmd_loss: expert features " + shape_str(e.shape()) +
                                                           " do not match student " + shape_str(student_feat.shape()));
  const double b = student_feat.dim(0);
  Tensor student_sum = ops::sum_rows(apply_mapping(student_feat, mapping));
  Tensor total;
  for (const auto& e : expert_feats) {
    Tensor diff = ops::sub(ops::sum_rows(apply_mapping(e, mapping)), student_sum);
    Tensor term = ops::sum(ops::square(diff));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return ops::scale(total, norm == MmdNormalization::batch_sum ? 1.0 / b : 1.0 / (b * b));
}

/// Summed squared error between each expert's original and decoded features.
inline Tensor reconstruction_loss(const std::vector<Tensor>& originals, const std::vector<Tensor>& decoded) {
  detail::require(originals.size() == decoded.size(), "reconstruction_loss: expert count mismatch");
  detail::require(!originals.empty(), "reconstruction_loss: no experts");
  Tensor total;
  for (std::size_t t = 0; t < originals.size(); ++t) {
    detail::require(originals[t].shape() == decoded[t].shape(),
                    "reconstruction_loss: expert " + std::to_string(t) + " shape " + shape_str(originals[t].shape()) +
                        " vs decoded " + shape_str(decoded[t].shape()));
    Tensor term = ops::sum(ops::square(ops::sub(originals[t], decoded[t])));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

/// L_FA = L_MMD + L_MSE with unit weights.
inline Tensor feature_alignment_loss(const Tensor& mmd, const Tensor& mse) {
  detail::require<NumericError>(std::isfinite(mmd.item()) && std::isfinite(mse.item()),
                                "feature_alignment_loss: non-finite input");
  detail::require(mmd.item() >= 0.0 && mse.item() >= 0.0, "feature_alignment_loss: negative component");
  return ops::add(mmd, mse);
}

/// Components of one alignment loss, kept for reporting.
struct AlignmentTerms {
  Tensor mmd;
  Tensor mse;
  Tensor total;
};

}  // namespace umkd
