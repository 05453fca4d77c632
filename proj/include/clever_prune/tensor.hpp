// Copyright 2026 The clever-prune Authors.
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

// Dense row-major float64 arrays and the handful of kernels the rest of the
// library is built from.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "clever_prune/errors.hpp"

namespace clever_prune {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_extents();
    data_.assign(shape_volume(shape_), 0.0);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_extents();
    if (data_.size() != shape_volume(shape_)) {
      throw DimensionError("tensor of shape " + shape_string(shape_) +
                           " needs " + std::to_string(shape_volume(shape_)) +
                           " values, got " + std::to_string(data_.size()));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor filled(Shape shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(m * n);
    for (const auto& row : rows) {
      if (row.size() != n) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({m, n}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  double& operator()(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }
  double operator()(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }

  // Same values under a different shape of equal volume.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  bool operator==(const Tensor& other) const = default;

 private:
  void validate_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) {
        throw DimensionError("tensor extents must be positive, got " +
                             shape_string(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) +
                         " by " + shape_string(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      if (aip == 0.0) continue;
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) {
    throw DimensionError("transpose expects a matrix, got " +
                         shape_string(a.shape()));
  }
  Tensor t({a.extent(1), a.extent(0)});
  for (std::size_t i = 0; i < a.extent(0); ++i)
    for (std::size_t j = 0; j < a.extent(1); ++j) t(j, i) = a(i, j);
  return t;
}

inline double dot(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw DimensionError("dot: lengths " + std::to_string(x.size()) + " and " +
                         std::to_string(y.size()) + " differ");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, zero padding)
// ---------------------------------------------------------------------------

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t filters, kernel_h, kernel_w;
  std::size_t stride, pad;
  std::size_t out_h, out_w;
};

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernels,
                                  std::size_t stride, std::size_t pad) {
  if (input.size() != 3 || kernels.size() != 4 || kernels[1] != input[0]) {
    throw DimensionError("conv2d: input " + shape_string(input) +
                         " incompatible with kernels " + shape_string(kernels));
  }
  if (stride == 0) throw DomainError("conv2d: stride must be positive");
  ConvGeometry g{input[0], input[1], input[2], kernels[0], kernels[2],
                 kernels[3], stride, pad, 0, 0};
  if (g.kernel_h > g.height + 2 * pad || g.kernel_w > g.width + 2 * pad) {
    throw DimensionError("conv2d: kernel " + shape_string(kernels) +
                         " larger than padded input " + shape_string(input));
  }
  g.out_h = (g.height + 2 * pad - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kernel_w) / stride + 1;
  return g;
}

inline Tensor conv2d(const Tensor& input, const Tensor& kernels,
                     const Tensor& bias, std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry(input.shape(), kernels.shape(), stride, pad);
  if (bias.size() != g.filters) {
    throw DimensionError("conv2d: bias " + shape_string(bias.shape()) +
                         " does not match " + std::to_string(g.filters) +
                         " filters");
  }
  Tensor out({g.filters, g.out_h, g.out_w});
  const double* x = input.data();
  const double* k = kernels.data();
  double* y = out.data();
  const long pad_l = static_cast<long>(pad);
  for (std::size_t f = 0; f < g.filters; ++f) {
    double* yf = y + f * g.out_h * g.out_w;
    std::fill(yf, yf + g.out_h * g.out_w, bias[f]);
    for (std::size_t c = 0; c < g.channels; ++c) {
      const double* xc = x + c * g.height * g.width;
      const double* kfc = k + (f * g.channels + c) * g.kernel_h * g.kernel_w;
      for (std::size_t oh = 0; oh < g.out_h; ++oh) {
        for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
          const long ih = static_cast<long>(oh * stride + kh) - pad_l;
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          const double* xrow = xc + ih * g.width;
          double* yrow = yf + oh * g.out_w;
          for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
            const double kv = kfc[kh * g.kernel_w + kw];
            if (kv == 0.0) continue;
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const long iw = static_cast<long>(ow * stride + kw) - pad_l;
              if (iw < 0 || iw >= static_cast<long>(g.width)) continue;
              yrow[ow] += kv * xrow[iw];
            }
          }
        }
      }
    }
  }
  return out;
}

// Adjoint of conv2d with respect to its input: scatters output-space values
// back through the kernels. Returns a tensor shaped like the input.
inline Tensor conv2d_transpose(const Tensor& grad_out, const Tensor& kernels,
                               const Shape& input_shape, std::size_t stride,
                               std::size_t pad) {
  const ConvGeometry g = conv_geometry(input_shape, kernels.shape(), stride, pad);
  if (grad_out.shape() != Shape{g.filters, g.out_h, g.out_w}) {
    throw DimensionError("conv2d_transpose: output gradient " +
                         shape_string(grad_out.shape()) + " does not match " +
                         shape_string({g.filters, g.out_h, g.out_w}));
  }
  Tensor grad_in(input_shape);
  double* gx = grad_in.data();
  const double* k = kernels.data();
  const long pad_l = static_cast<long>(pad);
  for (std::size_t f = 0; f < g.filters; ++f) {
    const double* gyf = grad_out.data() + f * g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c) {
      double* gxc = gx + c * g.height * g.width;
      const double* kfc = k + (f * g.channels + c) * g.kernel_h * g.kernel_w;
      for (std::size_t oh = 0; oh < g.out_h; ++oh) {
        for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
          const long ih = static_cast<long>(oh * stride + kh) - pad_l;
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          double* gxrow = gxc + ih * g.width;
          const double* gyrow = gyf + oh * g.out_w;
          for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
            const double kv = kfc[kh * g.kernel_w + kw];
            if (kv == 0.0) continue;
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const long iw = static_cast<long>(ow * stride + kw) - pad_l;
              if (iw < 0 || iw >= static_cast<long>(g.width)) continue;
              gxrow[iw] += kv * gyrow[ow];
            }
          }
        }
      }
    }
  }
  return grad_in;
}

// Gradient of sum(grad_out * conv2d(input, K)) with respect to K, accumulated
// into `grad_kernels`.
inline void conv2d_accumulate_kernel_grad(const Tensor& input,
                                          const Tensor& grad_out,
                                          Tensor& grad_kernels,
                                          std::size_t stride, std::size_t pad) {
  const ConvGeometry g =
      conv_geometry(input.shape(), grad_kernels.shape(), stride, pad);
  const long pad_l = static_cast<long>(pad);
  for (std::size_t f = 0; f < g.filters; ++f) {
    const double* gyf = grad_out.data() + f * g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c) {
      const double* xc = input.data() + c * g.height * g.width;
      double* gkfc =
          grad_kernels.data() + (f * g.channels + c) * g.kernel_h * g.kernel_w;
      for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
        for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
          double acc = 0.0;
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const long ih = static_cast<long>(oh * stride + kh) - pad_l;
            if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
            const double* xrow = xc + ih * g.width;
            const double* gyrow = gyf + oh * g.out_w;
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const long iw = static_cast<long>(ow * stride + kw) - pad_l;
              if (iw < 0 || iw >= static_cast<long>(g.width)) continue;
              acc += gyrow[ow] * xrow[iw];
            }
          }
          gkfc[kh * g.kernel_w + kw] += acc;
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise maps and reductions
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

inline void require_nonempty(std::span<const double> x, const char* op) {
  if (x.empty()) throw DomainError(std::string(op) + " over an empty range");
}

inline double sum(std::span<const double> x) {
  require_nonempty(x, "sum");
  double s = 0.0;
  for (double v : x) s += v;
  return s;
}

inline double l1_norm(std::span<const double> x) {
  require_nonempty(x, "l1 norm");
  double s = 0.0;
  for (double v : x) s += std::abs(v);
  return s;
}

inline double l2_norm(std::span<const double> x) {
  require_nonempty(x, "l2 norm");
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

inline double max_abs(std::span<const double> x) {
  require_nonempty(x, "max abs");
  double m = 0.0;
  for (double v : x) m = std::max(m, std::abs(v));
  return m;
}

inline std::size_t argmax(std::span<const double> x) {
  require_nonempty(x, "argmax");
  return static_cast<std::size_t>(std::max_element(x.begin(), x.end()) -
                                  x.begin());
}

inline std::vector<double> softmax(std::span<const double> logits) {
  require_nonempty(logits, "softmax");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

// -log softmax(logits)[label], computed stably.
inline double cross_entropy(std::span<const double> logits, std::size_t label) {
  require_nonempty(logits, "cross entropy");
  if (label >= logits.size()) {
    throw DomainError("cross entropy: label " + std::to_string(label) +
                      " >= class count " + std::to_string(logits.size()));
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  return std::log(z) + m - logits[label];
}

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("subtract: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

inline Tensor operator*(double s, const Tensor& a) {
  Tensor c = a;
  for (double& v : c.values()) v *= s;
  return c;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace clever_prune
