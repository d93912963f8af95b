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
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "umkd/ops.hpp"

namespace umkd {

/// Architecture description for a toy residual CNN.
///
/// Layout: a stride-2 3x3 stem, then one stage per entry of stage_channels.
/// Each stage is a 3x3 transition conv followed by a single-conv residual
/// block. The first and last stages keep resolution; the ones in between
/// halve it. With four stages the total downsampling factor is 8.
struct BackboneSpec {
  std::string name = "backbone";
  std::vector<int> stage_channels;
  int num_classes = 2;
  int input_height = 32;
  int input_width = 32;
  /// Stage whose output is tapped as the "shallow" feature map.
  int shallow_stage = 0;

  int num_stages() const { return static_cast<int>(stage_channels.size()); }
  int stage_stride(int s) const { return (s == 0 || s == num_stages() - 1) ? 1 : 2; }

  int downsampling() const {
    int f = 2;
    for (int s = 0; s < num_stages(); ++s) f *= stage_stride(s);
    return f;
  }

  int deep_channels() const { return stage_channels.back(); }
  int shallow_channels() const { return stage_channels.at(static_cast<std::size_t>(shallow_stage)); }

  /// Spatial size of stage `s`'s output.
  std::pair<int, int> stage_resolution(int s) const {
    int f = 2;
    for (int i = 0; i <= s; ++i) f *= stage_stride(i);
    return {input_height / f, input_width / f};
  }

  void validate() const {
    detail::require<ConfigError>(!stage_channels.empty(), "backbone '" + name + "': stage_channels is empty");
    detail::require<ConfigError>(num_stages() >= 2, "backbone '" + name + "': need at least two stages");
    for (int c : stage_channels)
      detail::require<ConfigError>(c >= 1, "backbone '" + name + "': stage width must be positive");
    detail::require<ConfigError>(num_classes >= 2, "backbone '" + name + "': num_classes must be >= 2");
    detail::require<ConfigError>(shallow_stage >= 0 && shallow_stage < num_stages(),
                                 "backbone '" + name + "': shallow_stage out of range");
    const int f = downsampling();
    detail::require<ConfigError>(input_height > 0 && input_width > 0 && input_height % f == 0 &&
                                     input_width % f == 0,
                                 "backbone '" + name + "': input resolution " + std::to_string(input_height) +
                                     "x" + std::to_string(input_width) + " not divisible by downsampling factor " +
                                     std::to_string(f));
  }
};

/// Pre-softmax class scores laid out over space, batched as [B, C, H, W].
class LogitsMap {
 public:
  LogitsMap() = default;
  explicit LogitsMap(Tensor values) : values_(std::move(values)) {
    detail::require(values_.rank() == 4, "LogitsMap: expected [B, C, H, W], got " + shape_str(values_.shape()));
    detail::require(values_.dim(1) >= 2, "LogitsMap: need at least two classes");
    for (double v : values_.values())
      detail::require<NumericError>(std::isfinite(v), "LogitsMap: non-finite score");
  }

  const Tensor& values() const { return values_; }
  int batch() const { return values_.dim(0); }
  int class_count() const { return values_.dim(1); }
  int height() const { return values_.dim(2); }
  int width() const { return values_.dim(3); }

 private:
  Tensor values_;
};

/// Everything the distillation losses read from one forward pass.
struct FeatureTaps {
  Tensor shallow;         // [B, C_s, H_s, W_s]
  Tensor deep;            // [B, C_d, H_d, W_d], last stage before the classifier
  LogitsMap logits_map;   // [B, C, H_d, W_d]
  Tensor pooled_logits;   // [B, C]
};

struct ConvParams {
  Tensor weight;  // [Co, Ci/groups, K, K]
  Tensor bias;    // [Co]
  int stride = 1;
  int pad = 0;
  int groups = 1;

  Tensor apply(const Tensor& x) const { return ops::conv2d(x, weight, bias, stride, pad, groups); }
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

template <typename Rng>
ConvParams make_conv(int ci, int co, int k, int stride, int pad, Rng& rng, int groups = 1) {
  const double fan_in = static_cast<double>(ci / groups) * k * k;
  ConvParams p;
  p.weight = Tensor::randn({co, ci / groups, k, k}, rng, std::sqrt(2.0 / fan_in), true);
  p.bias = Tensor::zeros({co}, true);
  p.stride = stride;
  p.pad = pad;
  p.groups = groups;
  return p;
}

/// Applies the classifier position-wise: out[c,h,w] = sum_k W[c,k] deep[k,h,w] + b[c].
inline LogitsMap logits_map_from_features(const Tensor& deep, const Tensor& weight, const Tensor& bias) {
  detail::require(deep.rank() == 4, "logits_map_from_features: deep map must be [B, C_d, H, W]");
  detail::require(weight.rank() == 2 && weight.dim(1) == deep.dim(1),
                  "logits_map_from_features: classifier " + shape_str(weight.shape()) +
                      " does not accept " + std::to_string(deep.dim(1)) + " channels");
  detail::require(bias.numel() == weight.dim(0), "logits_map_from_features: bias size mismatch");
  Tensor w4 = ops::reshape(weight, {weight.dim(0), weight.dim(1), 1, 1});
  return LogitsMap(ops::conv2d(deep, w4, bias, 1, 0));
}

namespace detail {

inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

/// Content hash of a parameter list (names, shapes and raw values).
inline std::uint64_t hash_parameters(const std::vector<NamedParam>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params) {
    h = detail::fnv1a(h, p.name.data(), p.name.size());
    for (int d : p.tensor.shape()) h = detail::fnv1a(h, &d, sizeof d);
    h = detail::fnv1a(h, p.tensor.values().data(), p.tensor.values().size() * sizeof(double));
  }
  return h;
}

/// Toy residual CNN exposing shallow/deep/logits taps.
class Backbone {
 public:
  Backbone() = default;

  Backbone(BackboneSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    std::mt19937_64 rng(seed);
    stem_ = make_conv(3, spec_.stage_channels[0], 3, 2, 1, rng);
    int in = spec_.stage_channels[0];
    for (int s = 0; s < spec_.num_stages(); ++s) {
      const int c = spec_.stage_channels[static_cast<std::size_t>(s)];
      transitions_.push_back(make_conv(in, c, 3, spec_.stage_stride(s), 1, rng));
      ConvParams res = make_conv(c, c, 3, 1, 1, rng);
      // Residual branch starts small so the initial network is close to the plain chain.
      for (auto& w : res.weight.data()) w *= 0.5;
      residuals_.push_back(std::move(res));
      in = c;
    }
    const int cd = spec_.deep_channels();
    head_weight_ = Tensor::randn({spec_.num_classes, cd}, rng, 1.0 / std::sqrt(static_cast<double>(cd)), true);
    head_bias_ = Tensor::zeros({spec_.num_classes}, true);
  }

  const BackboneSpec& spec() const { return spec_; }

  /// Single forward pass producing all four taps.
  FeatureTaps forward_with_taps(const Tensor& batch) const {
    detail::require(batch.rank() == 4 && batch.dim(1) == 3 && batch.dim(2) == spec_.input_height &&
                        batch.dim(3) == spec_.input_width,
                    "backbone '" + spec_.name + "': expected input [B, 3, " + std::to_string(spec_.input_height) +
                        ", " + std::to_string(spec_.input_width) + "], got " + shape_str(batch.shape()));
    for (double v : batch.values())
      detail::require<NumericError>(std::isfinite(v), "backbone '" + spec_.name + "': non-finite input");
    FeatureTaps taps;
    Tensor x = ops::relu(stem_.apply(batch));
    for (int s = 0; s < spec_.num_stages(); ++s) {
      x = ops::relu(transitions_[static_cast<std::size_t>(s)].apply(x));
      x = ops::relu(ops::add(x, residuals_[static_cast<std::size_t>(s)].apply(x)));
      if (s == spec_.shallow_stage) taps.shallow = x;
    }
    taps.deep = x;
    for (double v : x.values())
      detail::require<NumericError>(std::isfinite(v), "backbone '" + spec_.name + "': non-finite activation");
    taps.logits_map = logits_map_from_features(taps.deep, head_weight_, head_bias_);
    taps.pooled_logits = ops::global_avg_pool(taps.logits_map.values());
    return taps;
  }

  std::vector<NamedParam> parameters() const {
    std::vector<NamedParam> out;
    out.push_back({"stem.weight", stem_.weight});
    out.push_back({"stem.bias", stem_.bias});
    for (std::size_t s = 0; s < transitions_.size(); ++s) {
      const std::string p = "stage" + std::to_string(s + 1);
      out.push_back({p + ".transition.weight", transitions_[s].weight});
      out.push_back({p + ".transition.bias", transitions_[s].bias});
      out.push_back({p + ".residual.weight", residuals_[s].weight});
      out.push_back({p + ".residual.bias", residuals_[s].bias});
    }
    out.push_back({"head.weight", head_weight_});
    out.push_back({"head.bias", head_bias_});
    return out;
  }

  Tensor& head_weight() { return head_weight_; }
  Tensor& head_bias() { return head_bias_; }

  /// Deep copy with independent storage.
  Backbone clone() const {
    Backbone b = *this;
    b.stem_.weight = stem_.weight.clone();
    b.stem_.bias = stem_.bias.clone();
    for (std::size_t s = 0; s < transitions_.size(); ++s) {
      b.transitions_[s].weight = transitions_[s].weight.clone();
      b.transitions_[s].bias = transitions_[s].bias.clone();
      b.residuals_[s].weight = residuals_[s].weight.clone();
      b.residuals_[s].bias = residuals_[s].bias.clone();
    }
    b.head_weight_ = head_weight_.clone();
    b.head_bias_ = head_bias_.clone();
    return b;
  }

  void set_trainable(bool on) {
    for (auto& p : parameters()) p.tensor.set_requires_grad(on);
  }

  std::uint64_t weight_hash() const { return hash_parameters(parameters()); }

 private:
  BackboneSpec spec_;
  ConvParams stem_;
  std::vector<ConvParams> transitions_;
  std::vector<ConvParams> residuals_;
  Tensor head_weight_;
  Tensor head_bias_;
};

}  // namespace umkd
