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

#include <string>
#include <vector>

#include "umkd/align_losses.hpp"
#include "umkd/backbone.hpp"

namespace umkd {

struct SphereSpace {
  int dim = 512;
  double epsilon = 1e-12;

  void validate() const {
    detail::require<ConfigError>(dim >= 2, "SphereSpace: dim must be >= 2");
    detail::require<ConfigError>(epsilon > 0.0, "SphereSpace: epsilon must be > 0");
  }
};

/// 1x1-conv-equivalent map from a model's deep width to the sphere dimension.
using DimAdapter = AffineMap;

/// Global average pool, then the adapter. [B, C_d, H, W] -> [B, d].
inline Tensor adapt_and_pool(const Tensor& deep, const DimAdapter& adapter) {
  detail::require(deep.rank() == 4, "adapt_and_pool: expected [B, C_d, H, W], got " + shape_str(deep.shape()));
  detail::require(deep.dim(1) == adapter.in_dim(), "adapt_and_pool: adapter expects " +
                                                       std::to_string(adapter.in_dim()) + " channels, got " +
                                                       std::to_string(deep.dim(1)));
  return adapter.apply(ops::global_avg_pool(deep));
}

/// Row-wise L2 normalisation onto the unit sphere, clamped by epsilon.
inline Tensor project_to_sphere(const Tensor& v, const SphereSpace& space) {
  detail::require(v.rank() == 2 && v.dim(1) == space.dim,
                  "project_to_sphere: expected [B, " + std::to_string(space.dim) + "], got " + shape_str(v.shape()));
  return ops::l2_normalize_rows(v, space.epsilon);
}

/// Trainable state of compact feature alignment. Each expert's projector is its
/// dimension adapter; its decoder maps the spherical embedding back to the
/// pooled deep feature. The student only has an adapter.
struct CfaModule {
  SphereSpace space;
  std::vector<ProjectionPair> experts;
  DimAdapter student;

  /// Adapters are bias-free so the sphere projection makes the alignment
  /// invariant to positive rescaling of the pooled features.
  template <typename Rng>
  static CfaModule make(const std::vector<BackboneSpec>& expert_specs, const BackboneSpec& student_spec,
                        SphereSpace space, Rng& rng) {
    space.validate();
    CfaModule m;
    m.space = space;
    for (const auto& s : expert_specs)
      m.experts.push_back({AffineMap::random(s.deep_channels(), space.dim, rng, false),
                           AffineMap::random(space.dim, s.deep_channels(), rng, true)});
    m.student = student_spec.deep_channels() == space.dim
                    ? AffineMap::identity(space.dim, space.dim, false)
                    : AffineMap::random(student_spec.deep_channels(), space.dim, rng, false);
    return m;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> t = student.tensors();
    for (const auto& e : experts) {
      for (auto& x : e.projector.tensors()) t.push_back(x);
      for (auto& x : e.decoder.tensors()) t.push_back(x);
    }
    return t;
  }
};

/// L_CFA = L_MMD + L_MSE in the shared spherical space.
inline AlignmentTerms cfa_loss(const std::vector<Tensor>& expert_deep, const Tensor& student_deep,
                               const CfaModule& module, const MappingSpec& mapping = {},
                               MmdNormalization norm = MmdNormalization::batch_sum) {
  detail::require(expert_deep.size() == module.experts.size(),
                  "cfa_loss: got " + std::to_string(expert_deep.size()) + " expert maps for " +
                      std::to_string(module.experts.size()) + " adapters");
  std::vector<Tensor> embedded, originals, decoded;
  for (std::size_t t = 0; t < expert_deep.size(); ++t) {
    Tensor z = project_to_sphere(adapt_and_pool(expert_deep[t], module.experts[t].projector), module.space);
    embedded.push_back(z);
    originals.push_back(ops::global_avg_pool(expert_deep[t]));
    decoded.push_back(module.experts[t].decoder.apply(z));
  }
  Tensor zs = project_to_sphere(adapt_and_pool(student_deep, module.student), module.space);
  AlignmentTerms terms;
  terms.mmd = mmd_loss(embedded, zs, mapping, norm);
  terms.mse = reconstruction_loss(originals, decoded);
  terms.total = feature_alignment_loss(terms.mmd, terms.mse);
  return terms;
}

}  // namespace umkd
