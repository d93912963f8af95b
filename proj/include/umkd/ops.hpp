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

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "umkd/tensor.hpp"

// Differentiable tensor operations. Layouts are row-major; image tensors are
// NCHW. Every op validates shapes and throws InputError on mismatch.
namespace umkd::ops {

namespace detail {

using umkd::detail::grad_sink;
using umkd::detail::make_output;
using umkd::detail::require;
using umkd::detail::set_backward;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

inline void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<double> v(a.values().size());
  const auto& x = a.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = fwd(x[i]);
  Tensor out = make_output(a.shape(), std::move(v), {&a});
  set_backward(out, [a, deriv, y = out.node().get()](std::span<const double> g) {
    if (auto* ga = grad_sink(a)) {
      const auto& xv = a.values();
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * deriv(xv[i], y->value[i]);
    }
  });
  return out;
}

inline void check_rank(const Tensor& t, int r, const char* op) {
  require(t.rank() == r, std::string(op) + ": expected rank " + std::to_string(r) + ", got shape " +
                             shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "add");
  std::vector<double> v(a.values());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += b.values()[i];
  Tensor out = detail::make_output(a.shape(), std::move(v), {&a, &b});
  detail::set_backward(out, [a, b](std::span<const double> g) {
    if (auto* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = detail::grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
  });
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "sub");
  std::vector<double> v(a.values());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= b.values()[i];
  Tensor out = detail::make_output(a.shape(), std::move(v), {&a, &b});
  detail::set_backward(out, [a, b](std::span<const double> g) {
    if (auto* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = detail::grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "mul");
  std::vector<double> v(a.values());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= b.values()[i];
  Tensor out = detail::make_output(a.shape(), std::move(v), {&a, &b});
  detail::set_backward(out, [a, b](std::span<const double> g) {
    if (auto* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.values()[i];
    if (auto* gb = detail::grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.values()[i];
  });
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor cos(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::cos(x); },
                       [](double x, double) { return -std::sin(x); });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  Tensor out = detail::make_output({1}, {s}, {&a});
  detail::set_backward(out, [a](std::span<const double> g) {
    if (auto* ga = detail::grad_sink(a))
      for (auto& x : *ga) x += g[0];
  });
  return out;
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

/// Sum over the leading axis: [M, D] -> [D].
inline Tensor sum_rows(const Tensor& a) {
  detail::check_rank(a, 2, "sum_rows");
  const int m = a.dim(0), d = a.dim(1);
  std::vector<double> v(d, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j) v[j] += a.values()[static_cast<std::size_t>(i) * d + j];
  Tensor out = detail::make_output({d}, std::move(v), {&a});
  detail::set_backward(out, [a, m, d](std::span<const double> g) {
    if (auto* ga = detail::grad_sink(a))
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) (*ga)[static_cast<std::size_t>(i) * d + j] += g[j];
  });
  return out;
}

/// Sum over the trailing axis: [M, D] -> [M].
inline Tensor row_sum(const Tensor& a) {
  detail::check_rank(a, 2, "row_sum");
  const int m = a.dim(0), d = a.dim(1);
  std::vector<double> v(m, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j) v[i] += a.values()[static_cast<std::size_t>(i) * d + j];
  Tensor out = detail::make_output({m}, std::move(v), {&a});
  detail::set_backward(out, [a, m, d](std::span<const double> g) {
    if (auto* ga = detail::grad_sink(a))
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) (*ga)[static_cast<std::size_t>(i) * d + j] += g[i];
  });
  return out;
}

// ---------------------------------------------------------------- shape

inline Tensor reshape(const Tensor& a, Shape shape) {
  detail::require(shape_numel(shape) == a.numel(),
                  "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor out = detail::make_output(std::move(shape), a.values(), {&a});
  detail::set_backward(out, [a](std::span<const double> g) {
    if (auto* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
  return out;
}

/// [B, ...] -> [B, prod(...)].
inline Tensor flatten(const Tensor& a) {
  detail::require(a.rank() >= 1, "flatten: scalar input");
  return reshape(a, {a.dim(0), static_cast<int>(a.numel() / a.dim(0))});
}

/// Concatenates NCHW tensors along the channel axis.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_channels: no inputs");
  const int b = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  int c_total = 0;
  for (const auto& p : parts) {
    detail::check_rank(p, 4, "concat_channels");
    detail::require(p.dim(0) == b && p.dim(2) == h && p.dim(3) == w,
                    "concat_channels: incompatible shapes " + shape_str(parts[0].shape()) + " and " +
                        shape_str(p.shape()));
    c_total += p.dim(1);
  }
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<double> v(static_cast<std::size_t>(b) * c_total * hw);
  int c_off = 0;
  for (const auto& p : parts) {
    const int c = p.dim(1);
    for (int n = 0; n < b; ++n)
      std::copy_n(p.values().begin() + static_cast<std::ptrdiff_t>(n * c * hw), c * hw,
                  v.begin() + static_cast<std::ptrdiff_t>((n * c_total + c_off) * hw));
    c_off += c;
  }
  Tensor out = detail::make_output({b, c_total, h, w}, std::move(v), parts);
  detail::set_backward(out, [parts, b, c_total, hw](std::span<const double> g) {
    int off = 0;
    for (const auto& p : parts) {
      const int c = p.dim(1);
      if (auto* gp = detail::grad_sink(p))
        for (int n = 0; n < b; ++n)
          for (std::size_t i = 0; i < c * hw; ++i)
            (*gp)[n * c * hw + i] += g[(n * c_total + off) * hw + i];
      off += c;
    }
  });
  return out;
}

// ---------------------------------------------------------------- linear algebra

/// [M, K] x [K, N] -> [M, N].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check_rank(a, 2, "matmul");
  detail::check_rank(b, 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  detail::require(b.dim(0) == k, "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                                     shape_str(b.shape()));
  std::vector<double> v(static_cast<std::size_t>(m) * n);
  detail::MatMap(v.data(), m, n).noalias() =
      detail::CMatMap(a.values().data(), m, k) * detail::CMatMap(b.values().data(), k, n);
  Tensor out = detail::make_output({m, n}, std::move(v), {&a, &b});
  detail::set_backward(out, [a, b, m, k, n](std::span<const double> g) {
    detail::CMatMap gm(g.data(), m, n);
    if (auto* ga = detail::grad_sink(a))
      detail::MatMap(ga->data(), m, k).noalias() += gm * detail::CMatMap(b.values().data(), k, n).transpose();
    if (auto* gb = detail::grad_sink(b))
      detail::MatMap(gb->data(), k, n).noalias() += detail::CMatMap(a.values().data(), m, k).transpose() * gm;
  });
  return out;
}

/// Affine map on rows: x [B, In], weight [Out, In], bias [Out] (optional).
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor()) {
  detail::check_rank(x, 2, "linear");
  detail::check_rank(weight, 2, "linear");
  const int bsz = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  detail::require(weight.dim(1) == in, "linear: weight " + shape_str(weight.shape()) +
                                           " does not accept input " + shape_str(x.shape()));
  if (bias.defined())
    detail::require(bias.numel() == out_dim, "linear: bias size " + std::to_string(bias.numel()) +
                                                 " != " + std::to_string(out_dim));
  std::vector<double> v(static_cast<std::size_t>(bsz) * out_dim);
  detail::MatMap ov(v.data(), bsz, out_dim);
  ov.noalias() = detail::CMatMap(x.values().data(), bsz, in) *
                 detail::CMatMap(weight.values().data(), out_dim, in).transpose();
  if (bias.defined())
    for (int i = 0; i < bsz; ++i)
      for (int o = 0; o < out_dim; ++o) ov(i, o) += bias.values()[o];
  Tensor out = detail::make_output({bsz, out_dim}, std::move(v), {&x, &weight, &bias});
  detail::set_backward(out, [x, weight, bias, bsz, in, out_dim](std::span<const double> g) {
    detail::CMatMap gm(g.data(), bsz, out_dim);
    if (auto* gx = detail::grad_sink(x))
      detail::MatMap(gx->data(), bsz, in).noalias() += gm * detail::CMatMap(weight.values().data(), out_dim, in);
    if (auto* gw = detail::grad_sink(weight))
      detail::MatMap(gw->data(), out_dim, in).noalias() +=
          gm.transpose() * detail::CMatMap(x.values().data(), bsz, in);
    if (auto* gb = detail::grad_sink(bias))
      for (int i = 0; i < bsz; ++i)
        for (int o = 0; o < out_dim; ++o) (*gb)[o] += gm(i, o);
  });
  return out;
}

/// Adds a [D] vector to every row of [M, D].
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  detail::check_rank(x, 2, "add_rowvec");
  const int m = x.dim(0), d = x.dim(1);
  detail::require(v.numel() == d, "add_rowvec: vector size mismatch");
  std::vector<double> out_v(x.values());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j) out_v[static_cast<std::size_t>(i) * d + j] += v.values()[j];
  Tensor out = detail::make_output(x.shape(), std::move(out_v), {&x, &v});
  detail::set_backward(out, [x, v, m, d](std::span<const double> g) {
    if (auto* gx = detail::grad_sink(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    if (auto* gv = detail::grad_sink(v))
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) (*gv)[j] += g[static_cast<std::size_t>(i) * d + j];
  });
  return out;
}

// ---------------------------------------------------------------- row-wise normalizers

/// Row-wise softmax of [M, C].
inline Tensor softmax_rows(const Tensor& x) {
  detail::check_rank(x, 2, "softmax_rows");
  const int m = x.dim(0), c = x.dim(1);
  std::vector<double> v(x.values().size());
  for (int i = 0; i < m; ++i) {
    const double* row = x.values().data() + static_cast<std::size_t>(i) * c;
    double* o = v.data() + static_cast<std::size_t>(i) * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += (o[j] = std::exp(row[j] - mx));
    for (int j = 0; j < c; ++j) o[j] /= z;
  }
  Tensor out = detail::make_output(x.shape(), std::move(v), {&x});
  detail::set_backward(out, [x, m, c, y = out.node().get()](std::span<const double> g) {
    if (auto* gx = detail::grad_sink(x))
      for (int i = 0; i < m; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * c;
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += g[off + j] * y->value[off + j];
        for (int j = 0; j < c; ++j) (*gx)[off + j] += y->value[off + j] * (g[off + j] - dot);
      }
  });
  return out;
}

/// Row-wise log-softmax of [M, C].
inline Tensor log_softmax_rows(const Tensor& x) {
  detail::check_rank(x, 2, "log_softmax_rows");
  const int m = x.dim(0), c = x.dim(1);
  std::vector<double> v(x.values().size());
  for (int i = 0; i < m; ++i) {
    const double* row = x.values().data() + static_cast<std::size_t>(i) * c;
    double* o = v.data() + static_cast<std::size_t>(i) * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (int j = 0; j < c; ++j) o[j] = row[j] - lz;
  }
  Tensor out = detail::make_output(x.shape(), std::move(v), {&x});
  detail::set_backward(out, [x, m, c, y = out.node().get()](std::span<const double> g) {
    if (auto* gx = detail::grad_sink(x))
      for (int i = 0; i < m; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * c;
        double gs = 0.0;
        for (int j = 0; j < c; ++j) gs += g[off + j];
        for (int j = 0; j < c; ++j) (*gx)[off + j] += g[off + j] - std::exp(y->value[off + j]) * gs;
      }
  });
  return out;
}

/// Divides each row of [M, D] by max(||row||_2, eps).
inline Tensor l2_normalize_rows(const Tensor& x, double eps) {
  detail::check_rank(x, 2, "l2_normalize_rows");
  const int m = x.dim(0), d = x.dim(1);
  std::vector<double> v(x.values().size());
  std::vector<double> norms(m);
  for (int i = 0; i < m; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * d;
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += x.values()[off + j] * x.values()[off + j];
    norms[i] = std::sqrt(s);
    const double denom = std::max(norms[i], eps);
    for (int j = 0; j < d; ++j) v[off + j] = x.values()[off + j] / denom;
  }
  Tensor out = detail::make_output(x.shape(), std::move(v), {&x});
  detail::set_backward(out, [x, m, d, eps, norms, y = out.node().get()](std::span<const double> g) {
    if (auto* gx = detail::grad_sink(x))
      for (int i = 0; i < m; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * d;
        if (norms[i] <= eps) {
          for (int j = 0; j < d; ++j) (*gx)[off + j] += g[off + j] / eps;
          continue;
        }
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += g[off + j] * y->value[off + j];
        for (int j = 0; j < d; ++j) (*gx)[off + j] += (g[off + j] - y->value[off + j] * dot) / norms[i];
      }
  });
  return out;
}

/// Mean cross-entropy of [B, C] logits against integer labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  detail::check_rank(logits, 2, "cross_entropy");
  const int b = logits.dim(0), c = logits.dim(1);
  detail::require(static_cast<int>(labels.size()) == b, "cross_entropy: label count mismatch");
  Tensor lsm = log_softmax_rows(logits);
  std::vector<double> onehot(static_cast<std::size_t>(b) * c, 0.0);
  for (int i = 0; i < b; ++i) {
    detail::require(labels[i] >= 0 && labels[i] < c, "cross_entropy: label out of range");
    onehot[static_cast<std::size_t>(i) * c + labels[i]] = -1.0 / b;
  }
  return sum(mul(lsm, Tensor({b, c}, std::move(onehot))));
}

// ---------------------------------------------------------------- spatial

/// 2-D convolution (cross-correlation) of x [B, Ci, H, W] with weight
/// [Co, Ci/groups, K, K], optional bias [Co], symmetric zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad,
                     int groups = 1) {
  detail::check_rank(x, 4, "conv2d");
  detail::check_rank(weight, 4, "conv2d");
  const int bsz = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int co = weight.dim(0), cig = weight.dim(1), k = weight.dim(2);
  detail::require(weight.dim(3) == k, "conv2d: only square kernels are supported");
  detail::require(groups >= 1 && ci % groups == 0 && co % groups == 0 && cig == ci / groups,
                  "conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                      shape_str(x.shape()) + " and groups=" + std::to_string(groups));
  detail::require(stride >= 1 && pad >= 0, "conv2d: invalid stride/padding");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  detail::require(ho >= 1 && wo >= 1, "conv2d: kernel larger than padded input " + shape_str(x.shape()));
  if (bias.defined()) detail::require(bias.numel() == co, "conv2d: bias size mismatch");

  const std::size_t out_hw = static_cast<std::size_t>(ho) * wo;
  const std::size_t in_hw = static_cast<std::size_t>(h) * w;
  std::vector<double> v(static_cast<std::size_t>(bsz) * co * out_hw, 0.0);

  if (groups == 1) {
    // im2col over the whole batch: cols [Ci*K*K, B*Ho*Wo].
    const int rows = ci * k * k;
    const std::size_t cols_n = static_cast<std::size_t>(bsz) * out_hw;
    auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows) * cols_n, 0.0);
    for (int c = 0; c < ci; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          double* dst = cols->data() + static_cast<std::size_t>((c * k + ky) * k + kx) * cols_n;
          for (int n = 0; n < bsz; ++n) {
            const double* src = x.values().data() + (static_cast<std::size_t>(n) * ci + c) * in_hw;
            double* d = dst + n * out_hw;
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * stride - pad + kx;
                if (ix >= 0 && ix < w) d[oy * wo + ox] = src[iy * w + ix];
              }
            }
          }
        }
    detail::RowMat prod = detail::CMatMap(weight.values().data(), co, rows) *
                          detail::CMatMap(cols->data(), rows, static_cast<Eigen::Index>(cols_n));
    for (int n = 0; n < bsz; ++n)
      for (int o = 0; o < co; ++o) {
        const double bo = bias.defined() ? bias.values()[o] : 0.0;
        double* dst = v.data() + (static_cast<std::size_t>(n) * co + o) * out_hw;
        const double* src = prod.data() + static_cast<std::size_t>(o) * cols_n + n * out_hw;
        for (std::size_t i = 0; i < out_hw; ++i) dst[i] = src[i] + bo;
      }
    Tensor out = detail::make_output({bsz, co, ho, wo}, std::move(v), {&x, &weight, &bias});
    detail::set_backward(out, [=](std::span<const double> g) {
      // Rearrange the output gradient to [Co, B*Ho*Wo].
      detail::RowMat gm(co, static_cast<Eigen::Index>(cols_n));
      for (int n = 0; n < bsz; ++n)
        for (int o = 0; o < co; ++o)
          std::copy_n(g.data() + (static_cast<std::size_t>(n) * co + o) * out_hw, out_hw,
                      gm.data() + static_cast<std::size_t>(o) * cols_n + n * out_hw);
      if (auto* gw = detail::grad_sink(weight))
        detail::MatMap(gw->data(), co, rows).noalias() +=
            gm * detail::CMatMap(cols->data(), rows, static_cast<Eigen::Index>(cols_n)).transpose();
      if (auto* gb = detail::grad_sink(bias))
        for (int o = 0; o < co; ++o) (*gb)[o] += gm.row(o).sum();
      if (auto* gx = detail::grad_sink(x)) {
        detail::RowMat gcols = detail::CMatMap(weight.values().data(), co, rows).transpose() * gm;
        for (int c = 0; c < ci; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const double* srcc = gcols.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * cols_n;
              for (int n = 0; n < bsz; ++n) {
                double* dst = gx->data() + (static_cast<std::size_t>(n) * ci + c) * in_hw;
                const double* s = srcc + n * out_hw;
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= h) continue;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int ix = ox * stride - pad + kx;
                    if (ix >= 0 && ix < w) dst[iy * w + ix] += s[oy * wo + ox];
                  }
                }
              }
            }
      }
    });
    return out;
  }

  // Grouped path (depthwise and friends): direct loops.
  const int cog = co / groups;
  auto at_w = [&](int o, int c, int ky, int kx) {
    return ((static_cast<std::size_t>(o) * cig + c) * k + ky) * k + kx;
  };
  for (int n = 0; n < bsz; ++n)
    for (int o = 0; o < co; ++o) {
      const int grp = o / cog;
      double* dst = v.data() + (static_cast<std::size_t>(n) * co + o) * out_hw;
      const double bo = bias.defined() ? bias.values()[o] : 0.0;
      for (std::size_t i = 0; i < out_hw; ++i) dst[i] = bo;
      for (int c = 0; c < cig; ++c) {
        const double* src = x.values().data() + (static_cast<std::size_t>(n) * ci + grp * cig + c) * in_hw;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const double wv = weight.values()[at_w(o, c, ky, kx)];
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * stride - pad + kx;
                if (ix >= 0 && ix < w) dst[oy * wo + ox] += wv * src[iy * w + ix];
              }
            }
          }
      }
    }
  Tensor out = detail::make_output({bsz, co, ho, wo}, std::move(v), {&x, &weight, &bias});
  detail::set_backward(out, [=](std::span<const double> g) {
    auto* gx = detail::grad_sink(x);
    auto* gw = detail::grad_sink(weight);
    auto* gb = detail::grad_sink(bias);
    auto widx = [&](int o, int c, int ky, int kx) {
      return ((static_cast<std::size_t>(o) * cig + c) * k + ky) * k + kx;
    };
    for (int n = 0; n < bsz; ++n)
      for (int o = 0; o < co; ++o) {
        const int grp = o / cog;
        const double* go = g.data() + (static_cast<std::size_t>(n) * co + o) * out_hw;
        if (gb)
          for (std::size_t i = 0; i < out_hw; ++i) (*gb)[o] += go[i];
        for (int c = 0; c < cig; ++c) {
          const std::size_t in_off = (static_cast<std::size_t>(n) * ci + grp * cig + c) * in_hw;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const std::size_t wi = widx(o, c, ky, kx);
              const double wv = weight.values()[wi];
              double acc = 0.0;
              for (int oy = 0; oy < ho; ++oy) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int ox = 0; ox < wo; ++ox) {
                  const int ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= w) continue;
                  const double gval = go[oy * wo + ox];
                  acc += gval * x.values()[in_off + iy * w + ix];
                  if (gx) (*gx)[in_off + iy * w + ix] += gval * wv;
                }
              }
              if (gw) (*gw)[wi] += acc;
            }
        }
      }
  });
  return out;
}

/// Average pooling without padding; output extent floor((H - k) / s) + 1.
inline Tensor avg_pool2d(const Tensor& x, int kernel, int stride) {
  detail::check_rank(x, 4, "avg_pool2d");
  const int bsz = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  detail::require(kernel >= 1 && stride >= 1, "avg_pool2d: kernel and stride must be positive");
  detail::require(kernel <= h && kernel <= w, "avg_pool2d: kernel " + std::to_string(kernel) +
                                                  " exceeds spatial extent " + shape_str(x.shape()));
  const int ho = (h - kernel) / stride + 1, wo = (w - kernel) / stride + 1;
  const double inv = 1.0 / (static_cast<double>(kernel) * kernel);
  std::vector<double> v(static_cast<std::size_t>(bsz) * c * ho * wo, 0.0);
  for (int p = 0; p < bsz * c; ++p) {
    const double* src = x.values().data() + static_cast<std::size_t>(p) * h * w;
    double* dst = v.data() + static_cast<std::size_t>(p) * ho * wo;
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double s = 0.0;
        for (int ky = 0; ky < kernel; ++ky)
          for (int kx = 0; kx < kernel; ++kx) s += src[(oy * stride + ky) * w + ox * stride + kx];
        dst[oy * wo + ox] = s * inv;
      }
  }
  Tensor out = detail::make_output({bsz, c, ho, wo}, std::move(v), {&x});
  detail::set_backward(out, [=](std::span<const double> g) {
    if (auto* gx = detail::grad_sink(x))
      for (int p = 0; p < bsz * c; ++p) {
        double* dst = gx->data() + static_cast<std::size_t>(p) * h * w;
        const double* go = g.data() + static_cast<std::size_t>(p) * ho * wo;
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            const double gv = go[oy * wo + ox] * inv;
            for (int ky = 0; ky < kernel; ++ky)
              for (int kx = 0; kx < kernel; ++kx) dst[(oy * stride + ky) * w + ox * stride + kx] += gv;
          }
      }
  });
  return out;
}

namespace detail {

// Half-pixel-centre source coordinate, clamped to the valid sample range.
struct BilinearTap {
  int i0, i1;
  double t;
};

inline std::vector<BilinearTap> bilinear_taps(int in, int out) {
  std::vector<BilinearTap> taps(out);
  const double sc = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double s = (o + 0.5) * sc - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(s));
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, s - i0};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of NCHW to [B, C, out_h, out_w] (half-pixel centres, edge clamp).
inline Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
  detail::check_rank(x, 4, "resize_bilinear");
  detail::require(out_h >= 1 && out_w >= 1, "resize_bilinear: empty target");
  const int bsz = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = detail::bilinear_taps(h, out_h);
  const auto tx = detail::bilinear_taps(w, out_w);
  std::vector<double> v(static_cast<std::size_t>(bsz) * c * out_h * out_w);
  for (int p = 0; p < bsz * c; ++p) {
    const double* src = x.values().data() + static_cast<std::size_t>(p) * h * w;
    double* dst = v.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy)
      for (int ox = 0; ox < out_w; ++ox) {
        const auto& a = ty[oy];
        const auto& b = tx[ox];
        dst[oy * out_w + ox] = (1 - a.t) * ((1 - b.t) * src[a.i0 * w + b.i0] + b.t * src[a.i0 * w + b.i1]) +
                               a.t * ((1 - b.t) * src[a.i1 * w + b.i0] + b.t * src[a.i1 * w + b.i1]);
      }
  }
  Tensor out = detail::make_output({bsz, c, out_h, out_w}, std::move(v), {&x});
  detail::set_backward(out, [=](std::span<const double> g) {
    if (auto* gx = detail::grad_sink(x))
      for (int p = 0; p < bsz * c; ++p) {
        double* dst = gx->data() + static_cast<std::size_t>(p) * h * w;
        const double* go = g.data() + static_cast<std::size_t>(p) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy)
          for (int ox = 0; ox < out_w; ++ox) {
            const auto& a = ty[oy];
            const auto& b = tx[ox];
            const double gv = go[oy * out_w + ox];
            dst[a.i0 * w + b.i0] += gv * (1 - a.t) * (1 - b.t);
            dst[a.i0 * w + b.i1] += gv * (1 - a.t) * b.t;
            dst[a.i1 * w + b.i0] += gv * a.t * (1 - b.t);
            dst[a.i1 * w + b.i1] += gv * a.t * b.t;
          }
      }
  });
  return out;
}

/// Spatial mean: [B, C, H, W] -> [B, C].
inline Tensor global_avg_pool(const Tensor& x) {
  detail::check_rank(x, 4, "global_avg_pool");
  const int bsz = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  std::vector<double> v(static_cast<std::size_t>(bsz) * c);
  for (std::size_t p = 0; p < v.size(); ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += x.values()[p * hw + i];
    v[p] = s / static_cast<double>(hw);
  }
  Tensor out = detail::make_output({bsz, c}, std::move(v), {&x});
  detail::set_backward(out, [x, hw](std::span<const double> g) {
    if (auto* gx = detail::grad_sink(x))
      for (std::size_t p = 0; p < g.size(); ++p)
        for (std::size_t i = 0; i < hw; ++i) (*gx)[p * hw + i] += g[p] / static_cast<double>(hw);
  });
  return out;
}

/// Weighted sum of spatial cells. `cells` lists, for each output row, the flat
/// (y * W + x) positions it accumulates; output row r of sample n is at
/// n * cells.size() + r, shape [B * cells.size(), C]. Each accumulated sum is
/// multiplied by factors[r].
inline Tensor cell_sum(const Tensor& x, const std::vector<std::vector<int>>& cells,
                       const std::vector<double>& factors) {
  detail::check_rank(x, 4, "cell_sum");
  detail::require(cells.size() == factors.size(), "cell_sum: factor count mismatch");
  const int bsz = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const int r_n = static_cast<int>(cells.size());
  std::vector<double> v(static_cast<std::size_t>(bsz) * r_n * c, 0.0);
  for (int n = 0; n < bsz; ++n)
    for (int r = 0; r < r_n; ++r)
      for (int k = 0; k < c; ++k) {
        const double* src = x.values().data() + (static_cast<std::size_t>(n) * c + k) * hw;
        double s = 0.0;
        for (int pos : cells[r]) s += src[pos];
        v[(static_cast<std::size_t>(n) * r_n + r) * c + k] = s * factors[r];
      }
  Tensor out = detail::make_output({bsz * r_n, c}, std::move(v), {&x});
  detail::set_backward(out, [x, cells, factors, bsz, c, hw, r_n](std::span<const double> g) {
    if (auto* gx = detail::grad_sink(x))
      for (int n = 0; n < bsz; ++n)
        for (int r = 0; r < r_n; ++r)
          for (int k = 0; k < c; ++k) {
            const double gv = g[(static_cast<std::size_t>(n) * r_n + r) * c + k] * factors[r];
            double* dst = gx->data() + (static_cast<std::size_t>(n) * c + k) * hw;
            for (int pos : cells[r]) dst[pos] += gv;
          }
  });
  return out;
}

}  // namespace umkd::ops
