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

/// Multi-scale low-pass filter settings: one average-pool group per kernel,
/// each re-expanded bilinearly to a common grid.
struct MsLfConfig {
  std::vector<int> kernel_sizes{2, 4, 8};
  std::vector<int> strides{2, 4, 8};
  int target_height = 0;
  int target_width = 0;

  int groups() const { return static_cast<int>(kernel_sizes.size()); }

  void validate() const {
    detail::require<ConfigError>(!kernel_sizes.empty(), "MsLfConfig: at least one kernel size is required");
    detail::require<ConfigError>(strides.size() == kernel_sizes.size(),
                                 "MsLfConfig: strides and kernel_sizes differ in length");
    for (std::size_t m = 0; m < kernel_sizes.size(); ++m)
      detail::require<ConfigError>(kernel_sizes[m] >= 1 && strides[m] >= 1,
                                   "MsLfConfig: kernel sizes and strides must be positive");
    detail::require<ConfigError>(target_height >= 1 && target_width >= 1, "MsLfConfig: target resolution unset");
  }
};

/// Average-pools each group then resizes it to the target grid; groups are
/// concatenated along channels. [B, C, H, W] -> [B, M*C, H_ref, W_ref].
inline Tensor ms_low_pass(const Tensor& feature, const MsLfConfig& cfg) {
  cfg.validate();
  detail::require(feature.rank() == 4, "ms_low_pass: expected [B, C, H, W], got " + shape_str(feature.shape()));
  std::vector<Tensor> groups;
  for (int m = 0; m < cfg.groups(); ++m) {
    const int k = cfg.kernel_sizes[static_cast<std::size_t>(m)];
    detail::require(k <= feature.dim(2) && k <= feature.dim(3),
                    "ms_low_pass: kernel " + std::to_string(k) + " larger than feature extent " +
                        shape_str(feature.shape()));
    Tensor pooled = ops::avg_pool2d(feature, k, cfg.strides[static_cast<std::size_t>(m)]);
    groups.push_back(ops::resize_bilinear(pooled, cfg.target_height, cfg.target_width));
  }
  return groups.size() == 1 ? groups[0] : ops::concat_channels(groups);
}

/// Learnable student-side low-pass filter: strided-conv downsampling branch
/// and msLF branch, concatenated and fused by a 3x3 depthwise-separable conv.
struct StudentFilterParams {
  ConvParams downsample;  // kernel = stride = s
  ConvParams depthwise;   // 3x3, groups = concat channels
  ConvParams pointwise;   // 1x1, concat channels -> output channels

  int in_channels() const { return downsample.weight.dim(1); }
  int concat_channels() const { return depthwise.weight.dim(0); }
  int out_channels() const { return pointwise.weight.dim(0); }

  template <typename Rng>
  static StudentFilterParams make(int in_channels, int out_channels, int stride, const MsLfConfig& cfg, Rng& rng) {
    StudentFilterParams p;
    p.downsample = make_conv(in_channels, in_channels, stride, stride, 0, rng);
    const int cat = in_channels * (1 + cfg.groups());
    p.depthwise = make_conv(cat, cat, 3, 1, 1, rng, cat);
    p.pointwise = make_conv(cat, out_channels, 1, 1, 0, rng);
    return p;
  }

  std::vector<Tensor> tensors() const {
    return {downsample.weight, downsample.bias, depthwise.weight, depthwise.bias, pointwise.weight, pointwise.bias};
  }
};

/// Conv3x3(Concat[DownSample(F_S), msLF(F_S)]) with the 3x3 realised depthwise-separably.
inline Tensor student_filter(const Tensor& feature, const StudentFilterParams& params, const MsLfConfig& cfg) {
  detail::require(feature.rank() == 4 && feature.dim(1) == params.in_channels(),
                  "student_filter: feature " + shape_str(feature.shape()) + " does not match filter input of " +
                      std::to_string(params.in_channels()) + " channels");
  Tensor down = params.downsample.apply(feature);
  Tensor lowpass = ms_low_pass(feature, cfg);
  detail::require<ConfigError>(down.dim(2) == lowpass.dim(2) && down.dim(3) == lowpass.dim(3),
                               "student_filter: downsample branch " + shape_str(down.shape()) +
                                   " does not land on the msLF grid " + shape_str(lowpass.shape()));
  Tensor cat = ops::concat_channels({down, lowpass});
  detail::require<ConfigError>(cat.dim(1) == params.concat_channels(),
                               "student_filter: fuse conv expects " + std::to_string(params.concat_channels()) +
                                   " channels, got " + std::to_string(cat.dim(1)));
  return params.pointwise.apply(params.depthwise.apply(cat));
}

/// Trainable state of shallow feature alignment.
struct SfaModule {
  MsLfConfig config;
  StudentFilterParams student;
  std::vector<ProjectionPair> experts;  // projector: M*C_t -> D, decoder: D -> M*C_t

  /// Grid and stride convention: target = expert shallow extent / 2; the
  /// student downsample stride lands the student on that grid.
  template <typename Rng>
  static SfaModule make(const std::vector<BackboneSpec>& expert_specs, const BackboneSpec& student_spec,
                        std::vector<int> kernel_sizes, std::vector<int> strides, int out_channels, Rng& rng) {
    SfaModule m;
    const auto [eh, ew] = expert_specs.at(0).stage_resolution(expert_specs[0].shallow_stage);
    for (const auto& s : expert_specs) {
      const auto [h, w] = s.stage_resolution(s.shallow_stage);
      detail::require<ConfigError>(h == eh && w == ew, "SFA: experts disagree on shallow resolution");
    }
    m.config.kernel_sizes = std::move(kernel_sizes);
    m.config.strides = std::move(strides);
    m.config.target_height = std::max(1, eh / 2);
    m.config.target_width = std::max(1, ew / 2);
    m.config.validate();
    const auto [sh, sw] = student_spec.stage_resolution(student_spec.shallow_stage);
    detail::require<ConfigError>(sh % m.config.target_height == 0 && sw % m.config.target_width == 0 &&
                                     sh / m.config.target_height == sw / m.config.target_width,
                                 "SFA: student shallow map " + std::to_string(sh) + "x" + std::to_string(sw) +
                                     " cannot be downsampled onto the " + std::to_string(m.config.target_height) +
                                     "x" + std::to_string(m.config.target_width) + " grid");
    const int stride = sh / m.config.target_height;
    m.student = StudentFilterParams::make(student_spec.shallow_channels(), out_channels, stride, m.config, rng);
    for (const auto& s : expert_specs) {
      const int c = s.shallow_channels() * m.config.groups();
      m.experts.push_back({AffineMap::random(c, out_channels, rng, true), AffineMap::random(out_channels, c, rng, true)});
    }
    return m;
  }

  std::vector<Tensor> tensors() const {
    auto t = student.tensors();
    for (const auto& e : experts) {
      for (auto& x : e.projector.tensors()) t.push_back(x);
      for (auto& x : e.decoder.tensors()) t.push_back(x);
    }
    return t;
  }
};

/// L_SFA = L_MMD + L_MSE on low-pass-filtered shallow features.
inline AlignmentTerms sfa_loss(const std::vector<Tensor>& expert_shallow, const Tensor& student_shallow,
                               const SfaModule& module, const MappingSpec& mapping = {},
                               MmdNormalization norm = MmdNormalization::batch_sum) {
  detail::require(expert_shallow.size() == module.experts.size(),
                  "sfa_loss: got " + std::to_string(expert_shallow.size()) + " expert maps for " +
                      std::to_string(module.experts.size()) + " projection pairs");
  std::vector<Tensor> projected, originals, decoded;
  for (std::size_t t = 0; t < expert_shallow.size(); ++t) {
    Tensor filtered = ms_low_pass(expert_shallow[t], module.config);
    Tensor proj = module.experts[t].projector.apply(filtered);
    projected.push_back(ops::flatten(proj));
    originals.push_back(filtered);
    decoded.push_back(module.experts[t].decoder.apply(proj));
  }
  Tensor student = ops::flatten(student_filter(student_shallow, module.student, module.config));
  AlignmentTerms terms;
  terms.mmd = mmd_loss(projected, student, mapping, norm);
  terms.mse = reconstruction_loss(originals, decoded);
  terms.total = feature_alignment_loss(terms.mmd, terms.mse);
  return terms;
}

}  // namespace umkd
