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
#include <span>
#include <string>
#include <vector>

#include "umkd/backbone.hpp"

namespace umkd {

/// Partition widths W = {1, 2, 4, ..., w_max}.
struct ScaleSet {
  std::vector<int> scales{1, 2, 4};

  void validate() const {
    detail::require<ConfigError>(!scales.empty() && scales.front() == 1, "ScaleSet: scales must start at 1");
    for (std::size_t i = 1; i < scales.size(); ++i)
      detail::require<ConfigError>(scales[i] > scales[i - 1], "ScaleSet: scales must be strictly increasing");
  }

  void validate_for(int height, int width) const {
    validate();
    detail::require(scales.back() <= std::min(height, width),
                    "ScaleSet: w_max=" + std::to_string(scales.back()) + " exceeds logits map " +
                        std::to_string(height) + "x" + std::to_string(width));
  }
};

/// How accumulated cell logits are normalised.
/// `literal`: divide every cell's sum by w^2. `cell_mean`: divide by the cell's size.
enum class CellNormalization { literal, cell_mean };

/// Splits an H x W grid into a w x w grid of cells, row-major. Each cell is
/// the list of flat positions y * W + x it covers. When H or W is not a
/// multiple of w the last row/column of cells absorbs the remainder.
inline std::vector<std::vector<int>> partition_cells(int height, int width, int w) {
  detail::require(w >= 1 && w <= std::min(height, width),
                  "partition_cells: scale " + std::to_string(w) + " out of range for " + std::to_string(height) + "x" +
                      std::to_string(width));
  auto bounds = [w](int extent) {
    std::vector<int> b(static_cast<std::size_t>(w) + 1);
    const int base = extent / w;
    for (int i = 0; i < w; ++i) b[static_cast<std::size_t>(i)] = i * base;
    b[static_cast<std::size_t>(w)] = extent;
    return b;
  };
  const auto ry = bounds(height), rx = bounds(width);
  std::vector<std::vector<int>> cells;
  cells.reserve(static_cast<std::size_t>(w) * w);
  for (int cy = 0; cy < w; ++cy)
    for (int cx = 0; cx < w; ++cx) {
      std::vector<int> cell;
      for (int y = ry[cy]; y < ry[cy + 1]; ++y)
        for (int x = rx[cx]; x < rx[cx + 1]; ++x) cell.push_back(y * width + x);
      cells.push_back(std::move(cell));
    }
  return cells;
}

/// psi(w, n) for every cell of every sample: [B * w^2, C], sample-major,
/// cells row-major within a sample.
inline Tensor accumulate_logits(const LogitsMap& logits, int w,
                                CellNormalization norm = CellNormalization::literal) {
  const auto cells = partition_cells(logits.height(), logits.width(), w);
  std::vector<double> factors(cells.size());
  for (std::size_t n = 0; n < cells.size(); ++n)
    factors[n] = norm == CellNormalization::literal ? 1.0 / (static_cast<double>(w) * w)
                                                    : 1.0 / static_cast<double>(cells[n].size());
  return ops::cell_sum(logits.values(), cells, factors);
}

/// U = 1 - max softmax(psi).
inline double uncertainty(std::span<const double> psi) {
  detail::require(psi.size() >= 2, "uncertainty: need at least two classes");
  for (double v : psi) detail::require<NumericError>(std::isfinite(v), "uncertainty: non-finite logit");
  const double mx = *std::max_element(psi.begin(), psi.end());
  double z = 0.0;
  for (double v : psi) z += std::exp(v - mx);
  // The max-logit class has softmax exp(0) / z.
  return 1.0 - 1.0 / z;
}

/// Sum over rows of (2 + U) * ||softmax(psi_t) - softmax(psi_s)||^2 + (1 - U) * ||psi_t - psi_s||^2
/// for [M, C] teacher/student cell logits. U is read from the teacher values
/// and enters as a constant weight; the teacher is not differentiated.
inline Tensor udd_cell_loss(const Tensor& psi_t, const Tensor& psi_s) {
  detail::require(psi_t.rank() == 2 && psi_t.shape() == psi_s.shape(),
                  "udd_cell_loss: teacher " + shape_str(psi_t.shape()) + " vs student " + shape_str(psi_s.shape()));
  for (double v : psi_s.values()) detail::require<NumericError>(std::isfinite(v), "udd_cell_loss: non-finite student logit");
  const int m = psi_t.dim(0), c = psi_t.dim(1);
  std::vector<double> w_tckd(static_cast<std::size_t>(m)), w_nckd(static_cast<std::size_t>(m));
  for (int r = 0; r < m; ++r) {
    const double u = uncertainty(std::span<const double>(psi_t.values()).subspan(static_cast<std::size_t>(r) * c, c));
    w_tckd[static_cast<std::size_t>(r)] = 2.0 + u;
    w_nckd[static_cast<std::size_t>(r)] = 1.0 - u;
  }
  Tensor teacher = psi_t.detach();
  Tensor tckd = ops::row_sum(ops::square(ops::sub(ops::softmax_rows(teacher), ops::softmax_rows(psi_s))));
  Tensor nckd = ops::row_sum(ops::square(ops::sub(teacher, psi_s)));
  return ops::sum(ops::add(ops::mul(tckd, Tensor({m}, std::move(w_tckd))), ops::mul(nckd, Tensor({m}, std::move(w_nckd)))));
}

/// Sum over scales and cells of the cell loss, averaged over experts and
/// over the batch.
inline Tensor udd_loss(const std::vector<LogitsMap>& teacher_maps, const LogitsMap& student_map,
                       const ScaleSet& scales, CellNormalization norm = CellNormalization::literal) {
  detail::require(!teacher_maps.empty(), "udd_loss: no expert logits");
  scales.validate_for(student_map.height(), student_map.width());
  for (const auto& t : teacher_maps)
    detail::require(t.values().shape() == student_map.values().shape(),
                    "udd_loss: expert logits " + shape_str(t.values().shape()) + " vs student " +
                        shape_str(student_map.values().shape()));
  Tensor total;
  for (const auto& teacher : teacher_maps) {
    for (int w : scales.scales) {
      Tensor term = udd_cell_loss(accumulate_logits(teacher, w, norm).detach(), accumulate_logits(student_map, w, norm));
      total = total.defined() ? ops::add(total, term) : term;
    }
  }
  return ops::scale(total, 1.0 / (static_cast<double>(teacher_maps.size()) * student_map.batch()));
}

}  // namespace umkd
