// Copyright 2026 The HFUS Authors. All Rights Reserved.
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

// Differentiable tensor operations. Every op validates shapes, computes its
// forward value, checks it for NaN/Inf and, when a tape is active and any
// input requires a gradient, records its backward rule. No op mutates the
// value buffers of its inputs.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "hfus/error.hpp"
#include "hfus/tensor.hpp"

namespace hfus {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

inline Tensor finish(Tensor out, const char* op) {
  check_finite(out, op);
  return out;
}

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel, stride, padding;
  std::size_t out_height, out_width;
  std::size_t patch() const { return in_channels * kernel * kernel; }
  std::size_t positions() const { return out_height * out_width; }
};

inline void im2col(const double* image, const ConvGeometry& g, double* cols) {
  const std::size_t positions = g.positions();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const double* plane = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj, ++row) {
        double* out = cols + row * positions;
        for (std::size_t oh = 0; oh < g.out_height; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.padding);
          double* out_row = out + oh * g.out_width;
          if (ih < 0 || ih >= static_cast<long>(g.height)) {
            std::fill(out_row, out_row + g.out_width, 0.0);
            continue;
          }
          const double* in_row = plane + static_cast<std::size_t>(ih) * g.width;
          for (std::size_t ow = 0; ow < g.out_width; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.padding);
            out_row[ow] =
                (iw < 0 || iw >= static_cast<long>(g.width)) ? 0.0 : in_row[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

inline void col2im(const double* cols, const ConvGeometry& g, double* image) {
  const std::size_t positions = g.positions();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    double* plane = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj, ++row) {
        const double* in = cols + row * positions;
        for (std::size_t oh = 0; oh < g.out_height; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.padding);
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          double* img_row = plane + static_cast<std::size_t>(ih) * g.width;
          const double* in_row = in + oh * g.out_width;
          for (std::size_t ow = 0; ow < g.out_width; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.padding);
            if (iw >= 0 && iw < static_cast<long>(g.width)) img_row[static_cast<std::size_t>(iw)] += in_row[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D cross-correlation (no kernel flip). `input` is [C,H,W] or [N,C,H,W];
// `weight` is [O,C,k,k] with odd k; `bias` is [O].
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     std::size_t stride = 1, std::size_t padding = 0) {
  using detail::require;
  const bool batched = input.rank() == 4;
  require(input.rank() == 3 || batched,
          "conv2d: input must be [C,H,W] or [N,C,H,W], got " + shape_str(input.shape()));
  require(weight.rank() == 4, "conv2d: weight must be [O,C,k,k], got " + shape_str(weight.shape()));
  const std::size_t off = batched ? 1 : 0;
  detail::ConvGeometry g{};
  g.batch = batched ? input.dim(0) : 1;
  g.in_channels = input.dim(off);
  g.height = input.dim(off + 1);
  g.width = input.dim(off + 2);
  g.out_channels = weight.dim(0);
  g.kernel = weight.dim(2);
  g.stride = stride;
  g.padding = padding;
  require(weight.dim(1) == g.in_channels,
          "conv2d: weight dim 1 (input channels) = " + std::to_string(weight.dim(1)) +
              " but input channel dim " + std::to_string(off) + " = " + std::to_string(g.in_channels));
  require(weight.dim(3) == g.kernel, "conv2d: weight dims 2 and 3 must be equal (square kernel)");
  require(g.kernel % 2 == 1, "conv2d: kernel size (weight dim 2) must be odd, got " +
                                 std::to_string(g.kernel));
  require(bias.rank() == 1 && bias.dim(0) == g.out_channels,
          "conv2d: bias dim 0 must equal weight dim 0 (output channels) = " +
              std::to_string(g.out_channels) + ", got " + shape_str(bias.shape()));
  if (stride < 1) throw DomainError("conv2d: stride must be >= 1");
  require(g.height + 2 * padding >= g.kernel,
          "conv2d: input height (dim " + std::to_string(off + 1) + ") too small for kernel");
  require(g.width + 2 * padding >= g.kernel,
          "conv2d: input width (dim " + std::to_string(off + 2) + ") too small for kernel");
  g.out_height = (g.height + 2 * padding - g.kernel) / stride + 1;
  g.out_width = (g.width + 2 * padding - g.kernel) / stride + 1;

  const std::size_t in_size = g.in_channels * g.height * g.width;
  const std::size_t out_size = g.out_channels * g.positions();
  const std::size_t col_size = g.patch() * g.positions();
  std::vector<double> cols(g.batch * col_size);
  std::vector<double> out(g.batch * out_size);

  detail::ConstMapMatrix w(weight.values().data(), static_cast<long>(g.out_channels),
                           static_cast<long>(g.patch()));
  const auto b = Eigen::Map<const Eigen::VectorXd>(bias.values().data(), static_cast<long>(g.out_channels));
  for (std::size_t n = 0; n < g.batch; ++n) {
    double* col = cols.data() + n * col_size;
    detail::im2col(input.values().data() + n * in_size, g, col);
    detail::ConstMapMatrix c(col, static_cast<long>(g.patch()), static_cast<long>(g.positions()));
    detail::MapMatrix o(out.data() + n * out_size, static_cast<long>(g.out_channels),
                        static_cast<long>(g.positions()));
    o.noalias() = w * c;
    o.colwise() += b;
  }

  Shape shape = batched ? Shape{g.batch, g.out_channels, g.out_height, g.out_width}
                        : Shape{g.out_channels, g.out_height, g.out_width};
  Tensor result = detail::finish(Tensor(std::move(shape), std::move(out)), "conv2d");
  if (Tape* tape = detail::tracking_tape({&input, &weight, &bias})) {
    tape->record(result.data(), [input, weight, bias, g, cols = std::move(cols)](
                                    const std::vector<double>& grad_out) {
      const std::size_t in_size = g.in_channels * g.height * g.width;
      const std::size_t out_size = g.out_channels * g.positions();
      const std::size_t col_size = g.patch() * g.positions();
      const long oc = static_cast<long>(g.out_channels);
      const long patch = static_cast<long>(g.patch());
      const long pos = static_cast<long>(g.positions());
      detail::ConstMapMatrix w(weight.values().data(), oc, patch);
      detail::RowMatrix dw = detail::RowMatrix::Zero(oc, patch);
      Eigen::VectorXd db = Eigen::VectorXd::Zero(oc);
      std::vector<double> dinput(input.requires_grad() ? g.batch * in_size : 0, 0.0);
      std::vector<double> dcols(input.requires_grad() ? col_size : 0);
      for (std::size_t n = 0; n < g.batch; ++n) {
        detail::ConstMapMatrix go(grad_out.data() + n * out_size, oc, pos);
        if (weight.requires_grad()) {
          detail::ConstMapMatrix c(cols.data() + n * col_size, patch, pos);
          dw.noalias() += go * c.transpose();
        }
        if (bias.requires_grad()) db += go.rowwise().sum();
        if (input.requires_grad()) {
          detail::MapMatrix dc(dcols.data(), patch, pos);
          dc.noalias() = w.transpose() * go;
          detail::col2im(dcols.data(), g, dinput.data() + n * in_size);
        }
      }
      if (weight.requires_grad()) detail::accumulate(weight, {dw.data(), static_cast<std::size_t>(dw.size())});
      if (bias.requires_grad()) detail::accumulate(bias, {db.data(), static_cast<std::size_t>(db.size())});
      if (input.requires_grad()) detail::accumulate(input, dinput);
    });
  }
  return result;
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  Tensor result = detail::finish(Tensor(x.shape(), std::move(out)), "relu");
  if (Tape* tape = detail::tracking_tape({&x})) {
    tape->record(result.data(), [x](const std::vector<double>& grad_out) {
      std::vector<double> g(grad_out.size());
      const auto xv = x.values();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = xv[i] > 0.0 ? grad_out[i] : 0.0;
      detail::accumulate(x, g);
    });
  }
  return result;
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Split by sign so exp never overflows.
    out[i] = xv[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-xv[i])) : std::exp(xv[i]) / (1.0 + std::exp(xv[i]));
  }
  Tensor result = detail::finish(Tensor(x.shape(), std::move(out)), "sigmoid");
  if (Tape* tape = detail::tracking_tape({&x})) {
    tape->record(result.data(), [x, y = result.values()](const std::vector<double>& grad_out) {
      std::vector<double> g(grad_out.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * y[i] * (1.0 - y[i]);
      detail::accumulate(x, g);
    });
  }
  return result;
}

// y = W x + b with x [D], W [O,D], b [O].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  using detail::require;
  require(x.rank() == 1, "linear: input must be 1-D, got " + shape_str(x.shape()));
  require(weight.rank() == 2, "linear: weight must be [O,D], got " + shape_str(weight.shape()));
  require(weight.dim(1) == x.dim(0), "linear: weight dim 1 = " + std::to_string(weight.dim(1)) +
                                         " does not match input dim 0 = " + std::to_string(x.dim(0)));
  require(bias.rank() == 1 && bias.dim(0) == weight.dim(0),
          "linear: bias dim 0 must equal weight dim 0 = " + std::to_string(weight.dim(0)));
  const std::size_t rows = weight.dim(0), cols = weight.dim(1);
  std::vector<double> out(rows);
  const auto w = weight.values();
  const auto xv = x.values();
  for (std::size_t o = 0; o < rows; ++o) {
    double acc = bias[o];
    for (std::size_t d = 0; d < cols; ++d) acc += w[o * cols + d] * xv[d];
    out[o] = acc;
  }
  Tensor result = detail::finish(Tensor({rows}, std::move(out)), "linear");
  if (Tape* tape = detail::tracking_tape({&x, &weight, &bias})) {
    tape->record(result.data(), [x, weight, bias, rows, cols](const std::vector<double>& grad_out) {
      const auto w = weight.values();
      const auto xv = x.values();
      if (x.requires_grad()) {
        std::vector<double> gx(cols, 0.0);
        for (std::size_t o = 0; o < rows; ++o)
          for (std::size_t d = 0; d < cols; ++d) gx[d] += w[o * cols + d] * grad_out[o];
        detail::accumulate(x, gx);
      }
      if (weight.requires_grad()) {
        std::vector<double> gw(rows * cols);
        for (std::size_t o = 0; o < rows; ++o)
          for (std::size_t d = 0; d < cols; ++d) gw[o * cols + d] = grad_out[o] * xv[d];
        detail::accumulate(weight, gw);
      }
      detail::accumulate(bias, grad_out);
    });
  }
  return result;
}

// Concatenates 1-D tensors in order.
inline Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    detail::require(parts[i].rank() == 1, "concat: part " + std::to_string(i) + " must be 1-D, got " +
                                              shape_str(parts[i].shape()));
    offsets.push_back(out.size());
    out.insert(out.end(), parts[i].values().begin(), parts[i].values().end());
  }
  const std::size_t total = out.size();
  Tensor result = detail::finish(Tensor({total}, std::move(out)), "concat");
  if (Tape* tape = detail::tracking_tape(parts)) {
    tape->record(result.data(), [parts = std::vector<Tensor>(parts.begin(), parts.end()),
                                 offsets](const std::vector<double>& grad_out) {
      for (std::size_t i = 0; i < parts.size(); ++i) {
        detail::accumulate(parts[i], std::span<const double>(grad_out).subspan(offsets[i], parts[i].numel()));
      }
    });
  }
  return result;
}

inline Tensor concat(std::initializer_list<Tensor> parts) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()));
}

// Element-wise product. `b` either has a's shape or matches a's trailing
// dimensions, in which case it is broadcast over the leading ones (e.g. an
// [H,W] mask applied to every channel of a [C,H,W] map).
inline Tensor mul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sb.size() <= sa.size();
  for (std::size_t i = 0; ok && i < sb.size(); ++i) ok = sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i];
  if (!ok) {
    throw ShapeError("mul: shape " + shape_str(sb) + " does not match the trailing dimensions of " +
                     shape_str(sa));
  }
  const std::size_t inner = b.numel();
  std::vector<double> out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i % inner];
  Tensor result = detail::finish(Tensor(sa, std::move(out)), "mul");
  if (Tape* tape = detail::tracking_tape({&a, &b})) {
    tape->record(result.data(), [a, b, inner](const std::vector<double>& grad_out) {
      const auto av = a.values();
      const auto bv = b.values();
      if (a.requires_grad()) {
        std::vector<double> ga(grad_out.size());
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = grad_out[i] * bv[i % inner];
        detail::accumulate(a, ga);
      }
      if (b.requires_grad()) {
        std::vector<double> gb(inner, 0.0);
        for (std::size_t i = 0; i < grad_out.size(); ++i) gb[i % inner] += grad_out[i] * av[i];
        detail::accumulate(b, gb);
      }
    });
  }
  return result;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor result = detail::finish(Tensor(a.shape(), std::move(out)), "add");
  if (Tape* tape = detail::tracking_tape({&a, &b})) {
    tape->record(result.data(), [a, b](const std::vector<double>& grad_out) {
      detail::accumulate(a, grad_out);
      detail::accumulate(b, grad_out);
    });
  }
  return result;
}

inline Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  Tensor result = detail::finish(Tensor(x.shape(), std::move(out)), "scale");
  if (Tape* tape = detail::tracking_tape({&x})) {
    tape->record(result.data(), [x, factor](const std::vector<double>& grad_out) {
      std::vector<double> g(grad_out.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * factor;
      detail::accumulate(x, g);
    });
  }
  return result;
}

// Sum of all elements, as a [1] tensor.
inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor result = detail::finish(Tensor::scalar(acc), "sum");
  if (Tape* tape = detail::tracking_tape({&x})) {
    tape->record(result.data(), [x](const std::vector<double>& grad_out) {
      detail::accumulate(x, std::vector<double>(x.numel(), grad_out[0]));
    });
  }
  return result;
}

// Sub-tensor at `index` along dimension 0: [N, ...] -> [...].
inline Tensor select(const Tensor& x, std::size_t index) {
  detail::require(x.rank() >= 2, "select: input must have rank >= 2, got " + shape_str(x.shape()));
  detail::require(index < x.dim(0), "select: index " + std::to_string(index) + " out of range for dim 0 = " +
                                        std::to_string(x.dim(0)));
  Shape shape(x.shape().begin() + 1, x.shape().end());
  const std::size_t inner = shape_numel(shape);
  const auto begin = x.values().begin() + static_cast<long>(index * inner);
  Tensor result(std::move(shape), std::vector<double>(begin, begin + static_cast<long>(inner)));
  if (Tape* tape = detail::tracking_tape({&x})) {
    tape->record(result.data(), [x, index, inner](const std::vector<double>& grad_out) {
      auto& d = *x.data();
      d.ensure_grad();
      for (std::size_t i = 0; i < inner; ++i) d.grad[index * inner + i] += grad_out[i];
    });
  }
  return result;
}

// Stacks equally shaped tensors along a new leading dimension.
inline Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  const Shape& inner_shape = parts[0].shape();
  std::vector<double> out;
  out.reserve(parts.size() * parts[0].numel());
  for (std::size_t i = 0; i < parts.size(); ++i) {
    detail::require(parts[i].shape() == inner_shape, "stack: part " + std::to_string(i) + " has shape " +
                                                         shape_str(parts[i].shape()) + ", expected " +
                                                         shape_str(inner_shape));
    out.insert(out.end(), parts[i].values().begin(), parts[i].values().end());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner_shape.begin(), inner_shape.end());
  Tensor result(std::move(shape), std::move(out));
  if (Tape* tape = detail::tracking_tape(parts)) {
    tape->record(result.data(),
                 [parts = std::vector<Tensor>(parts.begin(), parts.end())](const std::vector<double>& grad_out) {
                   const std::size_t inner = parts[0].numel();
                   for (std::size_t i = 0; i < parts.size(); ++i) {
                     detail::accumulate(parts[i], std::span<const double>(grad_out).subspan(i * inner, inner));
                   }
                 });
  }
  return result;
}

// Spatial mean per channel: [C,H,W] -> [C].
inline Tensor global_avg_pool(const Tensor& x) {
  detail::require(x.rank() == 3, "global_avg_pool: input must be [C,H,W], got " + shape_str(x.shape()));
  const std::size_t channels = x.dim(0), area = x.dim(1) * x.dim(2);
  std::vector<double> out(channels, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < area; ++i) acc += x[c * area + i];
    out[c] = acc / static_cast<double>(area);
  }
  Tensor result = detail::finish(Tensor({channels}, std::move(out)), "global_avg_pool");
  if (Tape* tape = detail::tracking_tape({&x})) {
    tape->record(result.data(), [x, channels, area](const std::vector<double>& grad_out) {
      std::vector<double> g(channels * area);
      for (std::size_t c = 0; c < channels; ++c)
        std::fill_n(g.begin() + static_cast<long>(c * area), area, grad_out[c] / static_cast<double>(area));
      detail::accumulate(x, g);
    });
  }
  return result;
}

// Column-wise statistics of a [K,C] matrix, each returning [C].
inline Tensor mean_rows(const Tensor& x) {
  detail::require(x.rank() == 2, "mean_rows: input must be [K,C], got " + shape_str(x.shape()));
  const std::size_t k = x.dim(0), c = x.dim(1);
  std::vector<double> out(c, 0.0);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t j = 0; j < c; ++j) out[j] += x[r * c + j];
  for (double& v : out) v /= static_cast<double>(k);
  Tensor result = detail::finish(Tensor({c}, std::move(out)), "mean_rows");
  if (Tape* tape = detail::tracking_tape({&x})) {
    tape->record(result.data(), [x, k, c](const std::vector<double>& grad_out) {
      std::vector<double> g(k * c);
      for (std::size_t r = 0; r < k; ++r)
        for (std::size_t j = 0; j < c; ++j) g[r * c + j] = grad_out[j] / static_cast<double>(k);
      detail::accumulate(x, g);
    });
  }
  return result;
}

// Population variance (divisor K), so a single row yields exactly 0.
inline Tensor var_rows(const Tensor& x) {
  detail::require(x.rank() == 2, "var_rows: input must be [K,C], got " + shape_str(x.shape()));
  const std::size_t k = x.dim(0), c = x.dim(1);
  std::vector<double> mean(c, 0.0), out(c, 0.0);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t j = 0; j < c; ++j) mean[j] += x[r * c + j];
  for (double& v : mean) v /= static_cast<double>(k);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = x[r * c + j] - mean[j];
      out[j] += d * d;
    }
  for (double& v : out) v /= static_cast<double>(k);
  Tensor result = detail::finish(Tensor({c}, std::move(out)), "var_rows");
  if (Tape* tape = detail::tracking_tape({&x})) {
    tape->record(result.data(), [x, k, c, mean](const std::vector<double>& grad_out) {
      std::vector<double> g(k * c);
      for (std::size_t r = 0; r < k; ++r)
        for (std::size_t j = 0; j < c; ++j)
          g[r * c + j] = grad_out[j] * 2.0 * (x[r * c + j] - mean[j]) / static_cast<double>(k);
      detail::accumulate(x, g);
    });
  }
  return result;
}

// Column maximum; the gradient flows to the first maximal row.
inline Tensor max_rows(const Tensor& x) {
  detail::require(x.rank() == 2, "max_rows: input must be [K,C], got " + shape_str(x.shape()));
  const std::size_t k = x.dim(0), c = x.dim(1);
  std::vector<double> out(c);
  std::vector<std::size_t> argmax(c, 0);
  for (std::size_t j = 0; j < c; ++j) {
    out[j] = x[j];
    for (std::size_t r = 1; r < k; ++r) {
      if (x[r * c + j] > out[j]) {
        out[j] = x[r * c + j];
        argmax[j] = r;
      }
    }
  }
  Tensor result = detail::finish(Tensor({c}, std::move(out)), "max_rows");
  if (Tape* tape = detail::tracking_tape({&x})) {
    tape->record(result.data(), [x, k, c, argmax](const std::vector<double>& grad_out) {
      std::vector<double> g(k * c, 0.0);
      for (std::size_t j = 0; j < c; ++j) g[argmax[j] * c + j] = grad_out[j];
      detail::accumulate(x, g);
    });
  }
  return result;
}

inline constexpr double kLossEpsilon = 1e-7;

// Binary cross-entropy of a probability against a {0,1} label. The
// probability is clamped to [eps, 1-eps]; inside the clamp the gradient is the
// exact derivative, outside it is zero.
inline Tensor bce_loss(const Tensor& p, int label) {
  if (p.numel() != 1) throw ShapeError("bce_loss: probability must be a scalar, got " + shape_str(p.shape()));
  if (label != 0 && label != 1) throw DomainError("bce_loss: label must be 0 or 1");
  const double raw = p.item();
  const double q = std::clamp(raw, kLossEpsilon, 1.0 - kLossEpsilon);
  const double y = label;
  const double loss = -(y * std::log(q) + (1.0 - y) * std::log(1.0 - q));
  Tensor result = detail::finish(Tensor::scalar(loss), "bce_loss");
  if (Tape* tape = detail::tracking_tape({&p})) {
    const bool clamped = q != raw;
    tape->record(result.data(), [p, q, y, clamped](const std::vector<double>& grad_out) {
      const double g = clamped ? 0.0 : -(y / q - (1.0 - y) / (1.0 - q));
      detail::accumulate(p, std::vector<double>{grad_out[0] * g});
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Normalization kernels on [N,C,H,W]. The affine part is a separate op so that
// each sample can pick its own (gamma, beta), which is what view-specific
// parameterization needs.

namespace detail {

// Shared backward of (x - mean) * inv_std over groups of `count` elements:
// dx = inv_std / count * (count * dy - sum(dy) - xhat * sum(dy * xhat)).
inline void standardize_backward(std::span<const double> grad_out, std::span<const double> xhat,
                                 double inv_std, std::span<double> gx, std::size_t count) {
  double sum_dy = 0.0, sum_dy_xhat = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    sum_dy += grad_out[i];
    sum_dy_xhat += grad_out[i] * xhat[i];
  }
  const double n = static_cast<double>(count);
  for (std::size_t i = 0; i < count; ++i) {
    gx[i] = inv_std / n * (n * grad_out[i] - sum_dy - xhat[i] * sum_dy_xhat);
  }
}

inline void require_nchw(const Tensor& x, const char* op) {
  require(x.rank() == 4, std::string(op) + ": input must be [N,C,H,W], got " + shape_str(x.shape()));
}

}  // namespace detail

// Per-sample, per-channel standardization with population variance.
inline Tensor instance_normalize(const Tensor& x, double eps) {
  detail::require_nchw(x, "instance_normalize");
  if (!(eps >= 0.0)) throw DomainError("instance_normalize: eps must be >= 0");
  const std::size_t groups = x.dim(0) * x.dim(1), area = x.dim(2) * x.dim(3);
  std::vector<double> out(x.numel());
  std::vector<double> inv_std(groups);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const double* in = x.values().data() + gi * area;
    double mean = 0.0;
    for (std::size_t i = 0; i < area; ++i) mean += in[i];
    mean /= static_cast<double>(area);
    double var = 0.0;
    for (std::size_t i = 0; i < area; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= static_cast<double>(area);
    inv_std[gi] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < area; ++i) out[gi * area + i] = (in[i] - mean) * inv_std[gi];
  }
  Tensor result = detail::finish(Tensor(x.shape(), std::move(out)), "instance_normalize");
  if (Tape* tape = detail::tracking_tape({&x})) {
    tape->record(result.data(), [x, xhat = result.values(), inv_std, groups, area](
                                    const std::vector<double>& grad_out) {
      std::vector<double> g(x.numel());
      for (std::size_t gi = 0; gi < groups; ++gi) {
        const std::size_t o = gi * area;
        detail::standardize_backward(std::span(grad_out).subspan(o, area), xhat.subspan(o, area),
                                     inv_std[gi], std::span(g).subspan(o, area), area);
      }
      detail::accumulate(x, g);
    });
  }
  return result;
}

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> var;  // population
};

// Per-channel standardization with statistics pooled over (N,H,W). The batch
// statistics are written to `stats` when non-null.
inline Tensor batch_normalize(const Tensor& x, double eps, ChannelStats* stats = nullptr) {
  detail::require_nchw(x, "batch_normalize");
  if (!(eps >= 0.0)) throw DomainError("batch_normalize: eps must be >= 0");
  const std::size_t batch = x.dim(0), channels = x.dim(1), area = x.dim(2) * x.dim(3);
  const std::size_t count = batch * area;
  if (count < 2) throw DomainError("batch_normalize: needs at least 2 values per channel (N*H*W >= 2)");
  ChannelStats local{std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0)};
  std::vector<double> inv_std(channels);
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t c = 0; c < channels; ++c) {
    double mean = 0.0;
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t i = 0; i < area; ++i) mean += xv[(n * channels + c) * area + i];
    mean /= static_cast<double>(count);
    double var = 0.0;
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t i = 0; i < area; ++i) {
        const double d = xv[(n * channels + c) * area + i] - mean;
        var += d * d;
      }
    var /= static_cast<double>(count);
    local.mean[c] = mean;
    local.var[c] = var;
    inv_std[c] = 1.0 / std::sqrt(var + eps);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t i = 0; i < area; ++i) {
        const std::size_t idx = (n * channels + c) * area + i;
        out[idx] = (xv[idx] - mean) * inv_std[c];
      }
  }
  if (stats) *stats = local;
  Tensor result = detail::finish(Tensor(x.shape(), std::move(out)), "batch_normalize");
  if (Tape* tape = detail::tracking_tape({&x})) {
    tape->record(result.data(), [x, xhat = result.values(), inv_std, batch, channels, area](
                                    const std::vector<double>& grad_out) {
      const std::size_t count = batch * area;
      std::vector<double> g(x.numel());
      std::vector<double> gy(count), xh(count), gx(count);
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < area; ++i) {
            const std::size_t idx = (n * channels + c) * area + i;
            gy[n * area + i] = grad_out[idx];
            xh[n * area + i] = xhat[idx];
          }
        detail::standardize_backward(gy, xh, inv_std[c], gx, count);
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < area; ++i) g[(n * channels + c) * area + i] = gx[n * area + i];
      }
      detail::accumulate(x, g);
    });
  }
  return result;
}

// Standardization with fixed per-channel statistics (batch-norm inference).
inline Tensor normalize_with(const Tensor& x, std::span<const double> mean, std::span<const double> var,
                             double eps) {
  detail::require_nchw(x, "normalize_with");
  const std::size_t channels = x.dim(1), area = x.dim(2) * x.dim(3);
  detail::require(mean.size() == channels && var.size() == channels,
                  "normalize_with: statistics length must equal channel dim 1 = " + std::to_string(channels));
  std::vector<double> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  std::vector<double> out(x.numel());
  for (std::size_t idx = 0; idx < out.size(); ++idx) {
    const std::size_t c = (idx / area) % channels;
    out[idx] = (x[idx] - mean[c]) * inv_std[c];
  }
  Tensor result = detail::finish(Tensor(x.shape(), std::move(out)), "normalize_with");
  if (Tape* tape = detail::tracking_tape({&x})) {
    tape->record(result.data(), [x, inv_std, channels, area](const std::vector<double>& grad_out) {
      std::vector<double> g(grad_out.size());
      for (std::size_t idx = 0; idx < g.size(); ++idx) g[idx] = grad_out[idx] * inv_std[(idx / area) % channels];
      detail::accumulate(x, g);
    });
  }
  return result;
}

// y[n,c] = gamma_n[c] * x[n,c] + beta_n[c], where sample n uses gammas[n] and
// betas[n]. Entries may alias the same parameter tensor.
inline Tensor channel_affine(const Tensor& x, std::span<const Tensor> gammas, std::span<const Tensor> betas) {
  detail::require_nchw(x, "channel_affine");
  const std::size_t batch = x.dim(0), channels = x.dim(1), area = x.dim(2) * x.dim(3);
  detail::require(gammas.size() == batch && betas.size() == batch,
                  "channel_affine: need one (gamma, beta) per sample of dim 0 = " + std::to_string(batch));
  for (std::size_t n = 0; n < batch; ++n) {
    detail::require(gammas[n].rank() == 1 && gammas[n].dim(0) == channels && betas[n].rank() == 1 &&
                        betas[n].dim(0) == channels,
                    "channel_affine: gamma/beta length must equal channel dim 1 = " + std::to_string(channels));
  }
  std::vector<double> out(x.numel());
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      const double g = gammas[n][c], b = betas[n][c];
      const std::size_t o = (n * channels + c) * area;
      for (std::size_t i = 0; i < area; ++i) out[o + i] = g * x[o + i] + b;
    }
  Tensor result = detail::finish(Tensor(x.shape(), std::move(out)), "channel_affine");
  bool track = x.requires_grad();
  for (std::size_t n = 0; n < batch; ++n) track = track || gammas[n].requires_grad() || betas[n].requires_grad();
  Tape* tape = Tape::active();
  if (tape && track) {
    tape->record(result.data(), [x, gammas = std::vector<Tensor>(gammas.begin(), gammas.end()),
                                 betas = std::vector<Tensor>(betas.begin(), betas.end()), batch, channels,
                                 area](const std::vector<double>& grad_out) {
      std::vector<double> gx(x.requires_grad() ? x.numel() : 0);
      for (std::size_t n = 0; n < batch; ++n) {
        std::vector<double> gg(channels, 0.0), gb(channels, 0.0);
        for (std::size_t c = 0; c < channels; ++c) {
          const double g = gammas[n][c];
          const std::size_t o = (n * channels + c) * area;
          for (std::size_t i = 0; i < area; ++i) {
            gg[c] += grad_out[o + i] * x[o + i];
            gb[c] += grad_out[o + i];
            if (!gx.empty()) gx[o + i] = grad_out[o + i] * g;
          }
        }
        detail::accumulate(gammas[n], gg);
        detail::accumulate(betas[n], gb);
      }
      if (!gx.empty()) detail::accumulate(x, gx);
    });
  }
  return result;
}

}  // namespace hfus
