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
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "umkd/backbone.hpp"

namespace umkd {

/// One graded image: 3 x H x W values in channel-major order.
struct Sample {
  std::vector<double> pixels;
  int label = 0;
  std::int64_t id = 0;  // stable identity within the originating pool
};

struct GradingDataset {
  std::string name;
  int num_classes = 2;
  int height = 0;
  int width = 0;
  std::vector<Sample> samples;
  std::uint64_t seed = 0;

  std::size_t size() const { return samples.size(); }

  std::vector<int> class_counts() const {
    std::vector<int> c(static_cast<std::size_t>(num_classes), 0);
    for (const auto& s : samples) ++c.at(static_cast<std::size_t>(s.label));
    return c;
  }

  std::vector<int> labels() const {
    std::vector<int> l;
    l.reserve(samples.size());
    for (const auto& s : samples) l.push_back(s.label);
    return l;
  }

  /// Content checksum over labels and pixel bytes, in sample order.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& s : samples) {
      h = detail::fnv1a(h, &s.label, sizeof s.label);
      h = detail::fnv1a(h, s.pixels.data(), s.pixels.size() * sizeof(double));
    }
    return h;
  }

  GradingDataset subset(const std::vector<std::size_t>& indices, std::string new_name) const {
    GradingDataset d{std::move(new_name), num_classes, height, width, {}, seed};
    d.samples.reserve(indices.size());
    for (auto i : indices) d.samples.push_back(samples.at(i));
    return d;
  }
};

/// Structured manifest written next to every dataset a run consumes.
inline nlohmann::ordered_json dataset_manifest(const GradingDataset& ds) {
  nlohmann::ordered_json j;
  j["name"] = ds.name;
  j["num_classes"] = ds.num_classes;
  j["resolution"] = {ds.height, ds.width};
  j["size"] = ds.size();
  j["counts"] = ds.class_counts();
  j["seed"] = ds.seed;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(ds.checksum()));
  j["checksum"] = buf;
  return j;
}

struct ImbalanceProfile {
  std::vector<int> per_class_counts;
  std::uint64_t seed = 0;
};

namespace detail {

// Fisher-Yates on a 64-bit engine; avoids relying on distribution internals.
template <typename T>
void seeded_shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double normal(std::mt19937_64& rng) {
  // Box-Muller; deterministic across standard libraries.
  const double u1 = std::max(uniform01(rng), 1e-300);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace detail

/// Random sampling without replacement per class; sample order is preserved.
inline GradingDataset subsample_to_profile(const GradingDataset& ds, const ImbalanceProfile& profile) {
  detail::require(static_cast<int>(profile.per_class_counts.size()) == ds.num_classes,
                  "subsample_to_profile: profile has " + std::to_string(profile.per_class_counts.size()) +
                      " classes, dataset has " + std::to_string(ds.num_classes));
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.num_classes));
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    by_class[static_cast<std::size_t>(ds.samples[i].label)].push_back(i);
  std::mt19937_64 rng(profile.seed);
  std::vector<std::size_t> keep;
  for (int c = 0; c < ds.num_classes; ++c) {
    const int want = profile.per_class_counts[static_cast<std::size_t>(c)];
    auto& pool = by_class[static_cast<std::size_t>(c)];
    detail::require(want >= 1, "subsample_to_profile: class " + std::to_string(c) + " count must be >= 1");
    detail::require(want <= static_cast<int>(pool.size()),
                    "subsample_to_profile: class " + std::to_string(c) + " requests " + std::to_string(want) +
                        " samples but only " + std::to_string(pool.size()) + " are available");
    detail::seeded_shuffle(pool, rng);
    keep.insert(keep.end(), pool.begin(), pool.begin() + want);
  }
  std::sort(keep.begin(), keep.end());
  GradingDataset out = ds.subset(keep, ds.name);
  out.seed = profile.seed;
  return out;
}

struct SplitConfig {
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  std::uint64_t seed = 0;
  bool stratified = true;

  void validate() const {
    double s = 0.0;
    for (double r : ratios) {
      detail::require<ConfigError>(r > 0.0, "SplitConfig: ratios must be positive");
      s += r;
    }
    detail::require<ConfigError>(std::abs(s - 1.0) < 1e-9, "SplitConfig: ratios must sum to 1");
  }
};

struct DatasetSplits {
  GradingDataset train, val, test;
};

/// Disjoint train/val/test partition. Stratified splitting orders each class's
/// shuffled members by their quantile within the class, so every prefix of the
/// merged order is close to class-proportional.
inline DatasetSplits split(const GradingDataset& ds, const SplitConfig& cfg) {
  cfg.validate();
  detail::require(ds.size() >= 10, "split: need at least 10 samples, got " + std::to_string(ds.size()));
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order;
  if (cfg.stratified) {
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.num_classes));
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.samples[i].label)].push_back(i);
    std::vector<std::tuple<double, int, std::size_t>> keyed;
    for (int c = 0; c < ds.num_classes; ++c) {
      auto& members = by_class[static_cast<std::size_t>(c)];
      detail::seeded_shuffle(members, rng);
      for (std::size_t k = 0; k < members.size(); ++k)
        keyed.emplace_back((static_cast<double>(k) + 0.5) / static_cast<double>(members.size()), c, members[k]);
    }
    std::sort(keyed.begin(), keyed.end());
    for (const auto& [key, c, idx] : keyed) order.push_back(idx);
  } else {
    order.resize(ds.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    detail::seeded_shuffle(order, rng);
  }
  const auto n = static_cast<double>(ds.size());
  const auto n_train = static_cast<std::size_t>(std::llround(n * cfg.ratios[0]));
  const auto n_val = static_cast<std::size_t>(std::llround(n * cfg.ratios[1]));
  auto take = [&](std::size_t from, std::size_t to, const std::string& suffix) {
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(from),
                                 order.begin() + static_cast<std::ptrdiff_t>(to));
    std::sort(idx.begin(), idx.end());
    return ds.subset(idx, ds.name + "/" + suffix);
  };
  return {take(0, n_train, "train"), take(n_train, n_train + n_val, "val"), take(n_train + n_val, order.size(), "test")};
}

/// Augmentation policies. There is deliberately no colour transformation.
enum class AugmentPolicy { train, eval };
inline constexpr std::array<AugmentPolicy, 2> kAllAugmentPolicies{AugmentPolicy::train, AugmentPolicy::eval};

struct AugmentParams {
  int offset_y = 4;  // crop origin inside the 4-pixel zero-padded image
  int offset_x = 4;
  bool flip = false;
};

inline constexpr int kCropPadding = 4;

/// Zero-pad by kCropPadding, crop back to H x W at the given origin, then flip horizontally if requested.
inline std::vector<double> apply_augmentation(const std::vector<double>& pixels, int height, int width,
                                              const AugmentParams& p) {
  std::vector<double> out(pixels.size(), 0.0);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const int sy = y + p.offset_y - kCropPadding;
        const int sx_raw = x + p.offset_x - kCropPadding;
        const int dx = p.flip ? width - 1 - x : x;
        if (sy < 0 || sy >= height || sx_raw < 0 || sx_raw >= width) continue;
        out[(static_cast<std::size_t>(c) * height + y) * width + dx] =
            pixels[(static_cast<std::size_t>(c) * height + sy) * width + sx_raw];
      }
  return out;
}

/// Train: random crop with 4-pixel padding and horizontal flip (p = 0.5). Eval: identity.
inline Sample augment(const Sample& s, int height, int width, AugmentPolicy policy, std::mt19937_64& rng) {
  if (policy == AugmentPolicy::eval) return s;
  AugmentParams p;
  p.offset_y = static_cast<int>(rng() % (2 * kCropPadding + 1));
  p.offset_x = static_cast<int>(rng() % (2 * kCropPadding + 1));
  p.flip = (rng() & 1U) != 0;
  Sample out = s;
  out.pixels = apply_augmentation(s.pixels, height, width, p);
  return out;
}

/// Per-channel standardisation with statistics from a training split.
struct Normalizer {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};

  static Normalizer fit(const GradingDataset& ds) {
    Normalizer n;
    const std::size_t hw = static_cast<std::size_t>(ds.height) * ds.width;
    for (int c = 0; c < 3; ++c) {
      double s = 0.0, s2 = 0.0;
      for (const auto& smp : ds.samples)
        for (std::size_t i = 0; i < hw; ++i) {
          const double v = smp.pixels[c * hw + i];
          s += v;
          s2 += v * v;
        }
      const double cnt = static_cast<double>(hw * ds.samples.size());
      n.mean[static_cast<std::size_t>(c)] = s / cnt;
      n.stddev[static_cast<std::size_t>(c)] =
          std::max(std::sqrt(std::max(s2 / cnt - (s / cnt) * (s / cnt), 0.0)), 1e-6);
    }
    return n;
  }

  void apply(std::span<double> pixels, std::size_t hw) const {
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < hw; ++i) pixels[c * hw + i] = (pixels[c * hw + i] - mean[c]) / stddev[c];
  }

  nlohmann::ordered_json to_json() const { return {{"mean", mean}, {"stddev", stddev}}; }
};

/// Stacks samples into a normalised [B, 3, H, W] batch.
inline Tensor make_batch(const std::vector<const Sample*>& samples, int height, int width, const Normalizer& norm) {
  const std::size_t per = static_cast<std::size_t>(3) * height * width;
  std::vector<double> v(samples.size() * per);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::copy(samples[i]->pixels.begin(), samples[i]->pixels.end(), v.begin() + static_cast<std::ptrdiff_t>(i * per));
    norm.apply(std::span<double>(v).subspan(i * per, per), static_cast<std::size_t>(height) * width);
  }
  return Tensor({static_cast<int>(samples.size()), 3, height, width}, std::move(v));
}

/// Settings for the synthetic ordinal grading task. Grade g shows g + 1
/// bright "lesion" blobs in the red channel. noise_level scales every
/// nuisance factor: pixel noise, illumination offset, blob size/brightness
/// jitter and green "distractor" blobs. At noise_level 0 the red-channel mass
/// determines the grade exactly.
struct SynthSpec {
  int num_classes = 4;
  std::vector<int> counts;
  int height = 32;
  int width = 32;
  double noise_level = 1.0;
  std::uint64_t seed = 0;
};

inline GradingDataset synth_grading_dataset(const SynthSpec& spec) {
  detail::require(spec.num_classes >= 2, "synth_grading_dataset: need at least two classes");
  detail::require(static_cast<int>(spec.counts.size()) == spec.num_classes,
                  "synth_grading_dataset: counts must have one entry per class");
  detail::require(spec.noise_level >= 0.0, "synth_grading_dataset: noise_level must be >= 0");
  detail::require(spec.height >= 8 && spec.width >= 8, "synth_grading_dataset: resolution too small");
  GradingDataset ds;
  ds.name = "synthetic";
  ds.num_classes = spec.num_classes;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.seed = spec.seed;
  std::mt19937_64 rng(spec.seed);
  const double nl = spec.noise_level;
  const int h = spec.height, w = spec.width;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const double base_radius = 0.07 * std::min(h, w);
  const int margin = static_cast<int>(std::ceil(3.0 * base_radius * (1.0 + 0.3 * nl)));

  auto stamp = [&](std::vector<double>& px, int channel, double cy, double cx, double radius, double amp) {
    const int r = static_cast<int>(std::ceil(3.0 * radius));
    for (int y = std::max(0, static_cast<int>(cy) - r); y <= std::min(h - 1, static_cast<int>(cy) + r); ++y)
      for (int x = std::max(0, static_cast<int>(cx) - r); x <= std::min(w - 1, static_cast<int>(cx) + r); ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        px[static_cast<std::size_t>(channel) * hw + static_cast<std::size_t>(y) * w + x] +=
            amp * std::exp(-d2 / (2.0 * radius * radius));
      }
  };
  auto centre = [&](int extent) {
    const int lo = std::min(margin, extent / 2 - 1), hi = std::max(extent - 1 - margin, extent / 2 + 1);
    return lo + detail::uniform01(rng) * (hi - lo);
  };

  std::int64_t next_id = 0;
  for (int g = 0; g < spec.num_classes; ++g) {
    for (int k = 0; k < spec.counts[static_cast<std::size_t>(g)]; ++k) {
      Sample s;
      s.label = g;
      s.id = next_id++;
      s.pixels.assign(3 * hw, 0.0);
      const double illum = 0.2 + nl * 0.1 * detail::normal(rng);
      for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < hw; ++i) s.pixels[c * hw + i] = illum;
      for (int b = 0; b <= g; ++b) {
        const double radius = base_radius * (1.0 + 0.3 * nl * (2.0 * detail::uniform01(rng) - 1.0));
        const double amp = 0.8 * (1.0 + 0.35 * nl * (2.0 * detail::uniform01(rng) - 1.0));
        const double cy = centre(h), cx = centre(w);
        stamp(s.pixels, 0, cy, cx, radius, amp);
        // Lesions carry a faint blue halo so colour alone is not a shortcut.
        stamp(s.pixels, 2, cy, cx, 1.5 * radius, 0.15 * amp);
      }
      const int distractors = static_cast<int>(std::floor(nl * 3.0 * detail::uniform01(rng) + 0.5 * nl));
      for (int b = 0; b < distractors; ++b) {
        const double radius = base_radius * (1.0 + 0.3 * nl * (2.0 * detail::uniform01(rng) - 1.0));
        stamp(s.pixels, 1, centre(h), centre(w), radius, 0.8);
        // Distractors leak into red at reduced strength.
        stamp(s.pixels, 0, centre(h), centre(w), radius, 0.25 * nl);
      }
      for (auto& v : s.pixels) v += nl * 0.08 * detail::normal(rng);
      ds.samples.push_back(std::move(s));
    }
  }
  // Interleave classes so the generated order carries no label structure.
  std::vector<std::size_t> order(ds.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  detail::seeded_shuffle(order, rng);
  std::vector<Sample> shuffled;
  shuffled.reserve(order.size());
  for (auto i : order) shuffled.push_back(std::move(ds.samples[i]));
  ds.samples = std::move(shuffled);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) ds.samples[i].id = static_cast<std::int64_t>(i);
  return ds;
}

/// Scales a reference class profile to roughly `total` samples, keeping every class >= 1.
inline std::vector<int> scale_profile(const std::vector<int>& reference, int total) {
  const double ref_total = std::accumulate(reference.begin(), reference.end(), 0.0);
  std::vector<int> out;
  for (int r : reference) out.push_back(std::max(1, static_cast<int>(std::lround(r * total / ref_total))));
  return out;
}

}  // namespace umkd
