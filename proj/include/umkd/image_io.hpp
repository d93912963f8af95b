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
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "umkd/datasets.hpp"

// Image-folder ingestion: root/<class_name>/<file>.png|jpg|jpeg.
namespace umkd {

namespace detail {

inline bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace detail

/// Loads every class subdirectory of `root`. Classes are the subdirectory
/// names in lexicographic order (so "0", "1", ... map to grades 0, 1, ...);
/// files within a class are read in lexicographic path order. All images must
/// share one resolution.
inline GradingDataset load_image_folder(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IngestionError("load_image_folder: '" + root.string() + "' is not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.size() < 2)
    throw IngestionError("load_image_folder: '" + root.string() + "' needs at least two class subdirectories");

  GradingDataset ds;
  ds.name = root.filename().string();
  ds.num_classes = static_cast<int>(class_dirs.size());
  std::int64_t next_id = 0;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[c]))
      if (e.is_regular_file() && detail::is_image_file(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty())
      throw IngestionError("load_image_folder: class '" + class_dirs[c].filename().string() + "' has no images");
    for (const auto& f : files) {
      cv::Mat img = cv::imread(f.string(), cv::IMREAD_COLOR);
      if (img.empty()) throw IngestionError("load_image_folder: cannot decode '" + f.string() + "'");
      if (ds.height == 0) {
        ds.height = img.rows;
        ds.width = img.cols;
      } else if (img.rows != ds.height || img.cols != ds.width) {
        throw IngestionError("load_image_folder: '" + f.string() + "' is " + std::to_string(img.rows) + "x" +
                             std::to_string(img.cols) + ", expected " + std::to_string(ds.height) + "x" +
                             std::to_string(ds.width));
      }
      Sample s;
      s.label = static_cast<int>(c);
      s.id = next_id++;
      const std::size_t hw = static_cast<std::size_t>(img.rows) * img.cols;
      s.pixels.resize(3 * hw);
      for (int y = 0; y < img.rows; ++y)
        for (int x = 0; x < img.cols; ++x) {
          const auto& bgr = img.at<cv::Vec3b>(y, x);
          for (int ch = 0; ch < 3; ++ch)
            s.pixels[static_cast<std::size_t>(ch) * hw + static_cast<std::size_t>(y) * img.cols + x] = bgr[2 - ch] / 255.0;
        }
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

/// Writes a dataset as 8-bit PNGs under root/<label>/<index>.png, clamping to [0, 1].
inline void write_image_folder(const GradingDataset& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  const std::size_t hw = static_cast<std::size_t>(ds.height) * ds.width;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    const fs::path dir = root / std::to_string(s.label);
    fs::create_directories(dir);
    cv::Mat img(ds.height, ds.width, CV_8UC3);
    for (int y = 0; y < ds.height; ++y)
      for (int x = 0; x < ds.width; ++x)
        for (int ch = 0; ch < 3; ++ch) {
          const double v = s.pixels[static_cast<std::size_t>(ch) * hw + static_cast<std::size_t>(y) * ds.width + x];
          img.at<cv::Vec3b>(y, x)[2 - ch] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.png", i);
    if (!cv::imwrite((dir / name).string(), img))
      throw IngestionError("write_image_folder: cannot write '" + (dir / name).string() + "'");
  }
}

}  // namespace umkd
