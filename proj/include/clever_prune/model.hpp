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

// Sequential networks over single samples: layer definitions, forward pass
// with activation capture, reverse-mode gradients and Adam training.
//
// Layout conventions:
//   * Dense weights are [out x in] so that z = W a + b.
//   * Convolutional activations are [C x H x W]; kernels are [F x C x kh x kw].
//   * Scale and PcaScale act per unit on vectors and per channel on feature
//     maps (PcaScale mixes channels at every spatial position).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "clever_prune/errors.hpp"
#include "clever_prune/parallel.hpp"
#include "clever_prune/rng.hpp"
#include "clever_prune/tensor.hpp"

namespace clever_prune {

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Principal axes of a set of activation vectors.
struct PcaBasis {
  Tensor components;   // [n x K], orthonormal columns, descending eigenvalue
  Tensor mean;         // [n]
  Tensor eigenvalues;  // [K], non-negative, descending

  std::size_t dim() const { return components.extent(0); }
  std::size_t rank() const { return components.extent(1); }

  bool operator==(const PcaBasis&) const = default;
};

struct Dense {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  std::size_t in_features() const { return weight.extent(1); }
  std::size_t out_features() const { return weight.extent(0); }
  bool operator==(const Dense&) const = default;
};

struct Conv2D {
  Tensor kernels;  // [F x C x kh x kw]
  Tensor bias;     // [F]
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool operator==(const Conv2D&) const = default;
};

struct ReLU {
  bool operator==(const ReLU&) const = default;
};

struct MaxPool {
  std::size_t kernel = 2;
  std::size_t stride = 2;
  bool operator==(const MaxPool&) const = default;
};

struct Flatten {
  bool operator==(const Flatten&) const = default;
};

/// a_i <- c_i a_i with c in [0, 1].
struct Scale {
  Tensor coefficients;
  bool operator==(const Scale&) const = default;
};

/// a <- U diag(c) U^T (a - mean) + mean.
class PcaScale {
 public:
  PcaScale(PcaBasis basis, Tensor coefficients)
      : basis_(std::move(basis)), coefficients_(std::move(coefficients)) {
    const std::size_t n = basis_.dim(), k = basis_.rank();
    if (basis_.mean.size() != n || basis_.eigenvalues.size() != k ||
        coefficients_.size() != k) {
      throw DimensionError("PcaScale: basis " +
                           shape_string(basis_.components.shape()) +
                           " inconsistent with mean " +
                           shape_string(basis_.mean.shape()) +
                           " / coefficients " +
                           shape_string(coefficients_.shape()));
    }
    for (double c : coefficients_.values()) {
      if (!(c >= 0.0 && c <= 1.0)) {
        throw DomainError("PcaScale: coefficient " + std::to_string(c) +
                          " outside [0, 1]");
      }
    }
    projector_ = Tensor({n, n});
    const Tensor& u = basis_.components;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t q = 0; q < k; ++q)
          s += u(i, q) * coefficients_[q] * u(j, q);
        projector_(i, j) = s;
      }
    }
  }

  const PcaBasis& basis() const noexcept { return basis_; }
  const Tensor& coefficients() const noexcept { return coefficients_; }
  // U diag(c) U^T, symmetric.
  const Tensor& projector() const noexcept { return projector_; }
  std::size_t dim() const { return basis_.dim(); }

  bool operator==(const PcaScale& o) const {
    return basis_ == o.basis_ && coefficients_ == o.coefficients_;
  }

 private:
  PcaBasis basis_;
  Tensor coefficients_;
  Tensor projector_;
};

using Layer = std::variant<Dense, Conv2D, ReLU, MaxPool, Flatten, Scale, PcaScale>;

inline std::string layer_name(const Layer& layer) {
  static constexpr const char* names[] = {"Dense",   "Conv2D", "ReLU",    "MaxPool",
                                          "Flatten", "Scale",  "PcaScale"};
  return names[layer.index()];
}

inline bool is_refinement_layer(const Layer& layer) {
  return std::holds_alternative<Scale>(layer) ||
         std::holds_alternative<PcaScale>(layer);
}

inline bool has_parameters(const Layer& layer) {
  return std::holds_alternative<Dense>(layer) ||
         std::holds_alternative<Conv2D>(layer);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Sentinel layer index denoting the network input.
inline constexpr std::size_t kInputSite = static_cast<std::size_t>(-1);

struct Model {
  Shape input_shape;
  std::vector<Layer> layers;
  std::size_t class_count = 0;
  // Layer indices whose outputs may be refined (ReLU outputs).
  std::vector<std::size_t> refinable_sites;

  std::size_t layer_count() const noexcept { return layers.size(); }
  bool operator==(const Model&) const = default;
};

namespace detail {

inline std::size_t unit_axis_extent(const Shape& s) { return s[0]; }

inline Shape layer_output_shape(const Layer& layer, const Shape& in) {
  return std::visit(
      [&](const auto& l) -> Shape {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Dense>) {
          if (in.size() != 1 || in[0] != l.in_features()) {
            throw DimensionError("Dense expects [" +
                                 std::to_string(l.in_features()) + "], got " +
                                 shape_string(in));
          }
          if (l.bias.size() != l.out_features()) {
            throw DimensionError("Dense bias " + shape_string(l.bias.shape()) +
                                 " does not match weight " +
                                 shape_string(l.weight.shape()));
          }
          return {l.out_features()};
        } else if constexpr (std::is_same_v<T, Conv2D>) {
          const ConvGeometry g = conv_geometry(in, l.kernels.shape(), l.stride, l.pad);
          if (l.bias.size() != g.filters) {
            throw DimensionError("Conv2D bias does not match filter count");
          }
          return {g.filters, g.out_h, g.out_w};
        } else if constexpr (std::is_same_v<T, MaxPool>) {
          if (in.size() != 3 || l.kernel == 0 || l.stride == 0 ||
              in[1] < l.kernel || in[2] < l.kernel) {
            throw DimensionError("MaxPool(" + std::to_string(l.kernel) +
                                 ") cannot pool " + shape_string(in));
          }
          return {in[0], (in[1] - l.kernel) / l.stride + 1,
                  (in[2] - l.kernel) / l.stride + 1};
        } else if constexpr (std::is_same_v<T, Flatten>) {
          return {shape_volume(in)};
        } else if constexpr (std::is_same_v<T, Scale>) {
          if (l.coefficients.size() != unit_axis_extent(in)) {
            throw DimensionError("Scale with " +
                                 std::to_string(l.coefficients.size()) +
                                 " coefficients cannot act on " + shape_string(in));
          }
          return in;
        } else if constexpr (std::is_same_v<T, PcaScale>) {
          if (l.dim() != unit_axis_extent(in)) {
            throw DimensionError("PcaScale of dimension " + std::to_string(l.dim()) +
                                 " cannot act on " + shape_string(in));
          }
          return in;
        } else {
          return in;
        }
      },
      layer);
}

// Applies M (x - mean) + mean to the unit axis of x ([n] or [n x H x W]).
inline Tensor apply_affine_units(const Tensor& x, const Tensor& m,
                                 std::span<const double> mean) {
  const std::size_t n = x.extent(0);
  const std::size_t positions = x.size() / n;
  Tensor y(x.shape());
  std::vector<double> centered(n);
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t i = 0; i < n; ++i) centered[i] = x[i * positions + p] - mean[i];
    for (std::size_t i = 0; i < n; ++i) {
      double s = mean[i];
      const double* row = m.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) s += row[j] * centered[j];
      y[i * positions + p] = s;
    }
  }
  return y;
}

// M^T g on the unit axis.
inline Tensor apply_linear_units_transposed(const Tensor& g, const Tensor& m) {
  const std::size_t n = g.extent(0);
  const std::size_t positions = g.size() / n;
  Tensor y(g.shape());
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += m(i, j) * g[i * positions + p];
      y[j * positions + p] = s;
    }
  }
  return y;
}

inline Tensor scale_units(const Tensor& x, std::span<const double> c) {
  Tensor y = x;
  const std::size_t n = x.extent(0);
  const std::size_t positions = x.size() / n;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < positions; ++p) y[i * positions + p] *= c[i];
  return y;
}

// Index (into the input) of the winning element of each pooling window;
// ties resolve to the first element in row-major order.
inline std::vector<std::size_t> maxpool_argmax(const Tensor& x, const MaxPool& l,
                                               const Shape& out) {
  std::vector<std::size_t> idx(shape_volume(out));
  const std::size_t h = x.extent(1), w = x.extent(2);
  for (std::size_t c = 0; c < out[0]; ++c) {
    for (std::size_t oh = 0; oh < out[1]; ++oh) {
      for (std::size_t ow = 0; ow < out[2]; ++ow) {
        std::size_t best = (c * h + oh * l.stride) * w + ow * l.stride;
        for (std::size_t kh = 0; kh < l.kernel; ++kh) {
          for (std::size_t kw = 0; kw < l.kernel; ++kw) {
            const std::size_t at = (c * h + oh * l.stride + kh) * w + ow * l.stride + kw;
            if (x[at] > x[best]) best = at;
          }
        }
        idx[(c * out[1] + oh) * out[2] + ow] = best;
      }
    }
  }
  return idx;
}

inline Tensor apply_layer(const Layer& layer, const Tensor& x) {
  const Shape out_shape = layer_output_shape(layer, x.shape());
  return std::visit(
      [&](const auto& l) -> Tensor {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Dense>) {
          const std::size_t out = l.out_features(), in = l.in_features();
          Tensor y({out});
          for (std::size_t j = 0; j < out; ++j) {
            const double* row = l.weight.data() + j * in;
            double s = l.bias[j];
            for (std::size_t i = 0; i < in; ++i) s += row[i] * x[i];
            y[j] = s;
          }
          return y;
        } else if constexpr (std::is_same_v<T, Conv2D>) {
          return conv2d(x, l.kernels, l.bias, l.stride, l.pad);
        } else if constexpr (std::is_same_v<T, ReLU>) {
          return relu(x);
        } else if constexpr (std::is_same_v<T, MaxPool>) {
          const auto idx = maxpool_argmax(x, l, out_shape);
          Tensor y(out_shape);
          for (std::size_t o = 0; o < idx.size(); ++o) y[o] = x[idx[o]];
          return y;
        } else if constexpr (std::is_same_v<T, Flatten>) {
          return x.reshaped(out_shape);
        } else if constexpr (std::is_same_v<T, Scale>) {
          return scale_units(x, l.coefficients.values());
        } else {
          return apply_affine_units(x, l.projector(), l.basis().mean.values());
        }
      },
      layer);
}

}  // namespace detail

/// Output shape of every layer; throws naming the first incompatible layer.
inline std::vector<Shape> layer_output_shapes(const Model& model) {
  std::vector<Shape> shapes;
  shapes.reserve(model.layers.size());
  Shape current = model.input_shape;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    try {
      current = detail::layer_output_shape(model.layers[l], current);
    } catch (const DimensionError& e) {
      throw DimensionError("layer " + std::to_string(l) + " (" +
                           layer_name(model.layers[l]) + "): " + e.what());
    }
    shapes.push_back(current);
  }
  return shapes;
}

/// Checks topology and the Model invariants.
inline void validate(const Model& model) {
  const auto shapes = layer_output_shapes(model);
  if (shapes.empty() || shapes.back() != Shape{model.class_count}) {
    throw DimensionError("model output must be [" +
                         std::to_string(model.class_count) + "]");
  }
  for (std::size_t site : model.refinable_sites) {
    if (site >= model.layers.size() ||
        !std::holds_alternative<ReLU>(model.layers[site])) {
      throw PreconditionError("refinable site " + std::to_string(site) +
                              " is not a ReLU layer");
    }
  }
  for (const Layer& layer : model.layers) {
    const Tensor* c = nullptr;
    if (const auto* s = std::get_if<Scale>(&layer)) c = &s->coefficients;
    if (c) {
      for (double v : c->values()) {
        if (!(v >= 0.0 && v <= 1.0)) {
          throw DomainError("Scale coefficient " + std::to_string(v) +
                            " outside [0, 1]");
        }
      }
    }
  }
}

/// Outputs of layers [first, L); entries before `first` are left empty.
struct ActivationTrace {
  std::vector<Tensor> outputs;

  const Tensor& logits() const { return outputs.back(); }
};

/// Runs layers [first, L) on `input`, which must be the input of layer
/// `first` (the network input when first == 0).
inline ActivationTrace forward_trace_from(const Model& model, std::size_t first,
                                          const Tensor& input) {
  ActivationTrace trace;
  trace.outputs.resize(model.layers.size());
  const Tensor* current = &input;
  for (std::size_t l = first; l < model.layers.size(); ++l) {
    try {
      trace.outputs[l] = detail::apply_layer(model.layers[l], *current);
    } catch (const DimensionError& e) {
      throw DimensionError("layer " + std::to_string(l) + " (" +
                           layer_name(model.layers[l]) + "): " + e.what());
    }
    current = &trace.outputs[l];
  }
  return trace;
}

inline std::pair<Tensor, ActivationTrace> forward_with_trace(const Model& model,
                                                             const Tensor& x) {
  if (x.shape() != model.input_shape) {
    throw DimensionError("input " + shape_string(x.shape()) +
                         " does not match model input " +
                         shape_string(model.input_shape));
  }
  ActivationTrace trace = forward_trace_from(model, 0, x);
  Tensor logits = trace.outputs.empty() ? x : trace.outputs.back();
  return {std::move(logits), std::move(trace)};
}

inline Tensor forward(const Model& model, const Tensor& x) {
  if (x.shape() != model.input_shape) {
    throw DimensionError("input " + shape_string(x.shape()) +
                         " does not match model input " +
                         shape_string(model.input_shape));
  }
  Tensor current = x;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    try {
      current = detail::apply_layer(model.layers[l], current);
    } catch (const DimensionError& e) {
      throw DimensionError("layer " + std::to_string(l) + " (" +
                           layer_name(model.layers[l]) + "): " + e.what());
    }
  }
  return current;
}

/// The tensor feeding layer `l` (the network input for l == 0).
inline const Tensor& layer_input(const ActivationTrace& trace, const Tensor& x,
                                 std::size_t l) {
  return l == 0 ? x : trace.outputs[l - 1];
}

/// Activation at a site: a layer output, or the input for kInputSite.
inline const Tensor& site_activation(const ActivationTrace& trace, const Tensor& x,
                                     std::size_t site) {
  return site == kInputSite ? x : trace.outputs.at(site);
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Softmax cross-entropy against an integer label.
struct CrossEntropyLoss {
  std::size_t label;
};

/// A single raw output logit (used for attribution).
struct OutputLogit {
  std::size_t index;
};

using Objective = std::variant<CrossEntropyLoss, OutputLogit>;

/// Parameter gradients of one layer; both empty for parameter-free layers.
struct LayerGrad {
  Tensor weight;
  Tensor bias;
};

struct Gradients {
  double objective = 0.0;
  Tensor logits;
  std::vector<LayerGrad> params;       // per layer
  std::vector<Tensor> wrt_outputs;     // d objective / d output of layer l
  Tensor wrt_input;                    // d objective / d input
};

/// Zero-initialised parameter gradient slots matching the model.
inline std::vector<LayerGrad> zero_param_grads(const Model& model) {
  std::vector<LayerGrad> grads(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    if (const auto* d = std::get_if<Dense>(&model.layers[l])) {
      grads[l] = {Tensor(d->weight.shape()), Tensor(d->bias.shape())};
    } else if (const auto* c = std::get_if<Conv2D>(&model.layers[l])) {
      grads[l] = {Tensor(c->kernels.shape()), Tensor(c->bias.shape())};
    }
  }
  return grads;
}

namespace detail {

inline Tensor objective_gradient(const Objective& objective, const Tensor& logits,
                                 std::size_t class_count, double& value) {
  Tensor g(logits.shape());
  std::visit(
      [&](const auto& o) {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, CrossEntropyLoss>) {
          if (o.label >= class_count) {
            throw DomainError("label " + std::to_string(o.label) +
                              " >= class count " + std::to_string(class_count));
          }
          value = cross_entropy(logits.values(), o.label);
          const auto p = softmax(logits.values());
          for (std::size_t i = 0; i < p.size(); ++i) g[i] = p[i];
          g[o.label] -= 1.0;
        } else {
          if (o.index >= class_count) {
            throw DomainError("output index " + std::to_string(o.index) +
                              " >= class count " + std::to_string(class_count));
          }
          value = logits[o.index];
          g[o.index] = 1.0;
        }
      },
      objective);
  return g;
}

// Backward through one layer. Parameter gradients are added into
// `param_grad` when it is non-null; each element receives one addition.
inline Tensor backward_layer(const Layer& layer, const Tensor& in,
                             const Tensor& out, const Tensor& grad_out,
                             LayerGrad* param_grad) {
  return std::visit(
      [&](const auto& l) -> Tensor {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Dense>) {
          const std::size_t n_out = l.out_features(), n_in = l.in_features();
          Tensor grad_in({n_in});
          for (std::size_t j = 0; j < n_out; ++j) {
            const double g = grad_out[j];
            if (g == 0.0) continue;
            const double* row = l.weight.data() + j * n_in;
            for (std::size_t i = 0; i < n_in; ++i) grad_in[i] += row[i] * g;
          }
          if (param_grad) {
            for (std::size_t j = 0; j < n_out; ++j) {
              const double g = grad_out[j];
              double* grow = param_grad->weight.data() + j * n_in;
              for (std::size_t i = 0; i < n_in; ++i) grow[i] += g * in[i];
              param_grad->bias[j] += g;
            }
          }
          return grad_in;
        } else if constexpr (std::is_same_v<T, Conv2D>) {
          if (param_grad) {
            conv2d_accumulate_kernel_grad(in, grad_out, param_grad->weight,
                                          l.stride, l.pad);
            const std::size_t f_count = grad_out.extent(0);
            const std::size_t hw = grad_out.size() / f_count;
            for (std::size_t f = 0; f < f_count; ++f) {
              double s = 0.0;
              for (std::size_t p = 0; p < hw; ++p) s += grad_out[f * hw + p];
              param_grad->bias[f] += s;
            }
          }
          return conv2d_transpose(grad_out, l.kernels, in.shape(), l.stride, l.pad);
        } else if constexpr (std::is_same_v<T, ReLU>) {
          Tensor grad_in = grad_out;
          for (std::size_t i = 0; i < grad_in.size(); ++i)
            if (!(in[i] > 0.0)) grad_in[i] = 0.0;
          return grad_in;
        } else if constexpr (std::is_same_v<T, MaxPool>) {
          const auto idx = maxpool_argmax(in, l, out.shape());
          Tensor grad_in(in.shape());
          for (std::size_t o = 0; o < idx.size(); ++o) grad_in[idx[o]] += grad_out[o];
          return grad_in;
        } else if constexpr (std::is_same_v<T, Flatten>) {
          return grad_out.reshaped(in.shape());
        } else if constexpr (std::is_same_v<T, Scale>) {
          return scale_units(grad_out, l.coefficients.values());
        } else {
          return apply_linear_units_transposed(grad_out, l.projector());
        }
      },
      layer);
}

}  // namespace detail

/// Backpropagates `grad_logits` from the output down to the input of layer
/// `first`. `trace` must hold outputs of layers [first, L) computed from
/// `input`. Parameter gradients are accumulated into `param_grads` when given.
inline Gradients backpropagate(const Model& model, std::size_t first,
                               const Tensor& input, const ActivationTrace& trace,
                               Tensor grad_logits,
                               std::vector<LayerGrad>* param_grads) {
  Gradients g;
  g.wrt_outputs.resize(model.layers.size());
  Tensor grad = std::move(grad_logits);
  for (std::size_t l = model.layers.size(); l-- > first;) {
    g.wrt_outputs[l] = grad;
    const Tensor& in = l == first ? input : trace.outputs[l - 1];
    LayerGrad* pg = param_grads && has_parameters(model.layers[l])
                        ? &(*param_grads)[l]
                        : nullptr;
    grad = detail::backward_layer(model.layers[l], in, trace.outputs[l], grad, pg);
  }
  g.wrt_input = std::move(grad);
  return g;
}

/// Exact reverse-mode gradients of `objective` at x, for every parameter,
/// every layer output and the input. Scale/PcaScale layers are treated as
/// fixed and carry no parameter gradients.
inline Gradients gradients(const Model& model, const Tensor& x,
                           const Objective& objective) {
  auto [logits, trace] = forward_with_trace(model, x);
  double value = 0.0;
  Tensor grad_logits =
      detail::objective_gradient(objective, logits, model.class_count, value);
  std::vector<LayerGrad> params = zero_param_grads(model);
  Gradients g = backpropagate(model, 0, x, trace, std::move(grad_logits), &params);
  g.objective = value;
  g.logits = std::move(logits);
  g.params = std::move(params);
  return g;
}

// ---------------------------------------------------------------------------
// Labelled samples, prediction, accuracy
// ---------------------------------------------------------------------------

struct Samples {
  std::vector<Tensor> inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return inputs.size(); }
  bool empty() const noexcept { return inputs.empty(); }

  void push_back(Tensor x, std::size_t label) {
    inputs.push_back(std::move(x));
    labels.push_back(label);
  }

  Samples subset(std::span<const std::size_t> indices) const {
    Samples s;
    s.inputs.reserve(indices.size());
    s.labels.reserve(indices.size());
    for (std::size_t i : indices) s.push_back(inputs.at(i), labels.at(i));
    return s;
  }
};

inline std::vector<std::size_t> predict(const Model& model,
                                        const std::vector<Tensor>& inputs) {
  std::vector<std::size_t> out(inputs.size());
  parallel_for(inputs.size(), [&](std::size_t i) {
    const Tensor y = forward(model, inputs[i]);
    out[i] = argmax(y.values());
  });
  return out;
}

inline std::vector<Tensor> predict_logits(const Model& model,
                                          const std::vector<Tensor>& inputs) {
  std::vector<Tensor> out(inputs.size());
  parallel_for(inputs.size(), [&](std::size_t i) { out[i] = forward(model, inputs[i]); });
  return out;
}

inline double accuracy(const Model& model, const Samples& samples) {
  if (samples.empty()) throw DomainError("accuracy of an empty sample set");
  const auto pred = predict(model, samples.inputs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == samples.labels[i];
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::size_t epochs = 5;
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  // Elementwise gradient clipping bound; 0 disables clipping.
  double clip = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainLog {
  std::vector<double> epoch_loss;      // mean loss over the epoch
  std::vector<double> epoch_accuracy;  // training accuracy during the epoch
};

namespace detail {

struct AdamSlot {
  std::vector<double> m, v;
};

inline void adam_update(std::span<double> param, std::span<const double> grad,
                        AdamSlot& slot, const TrainOptions& opt, double bias1,
                        double bias2) {
  if (slot.m.empty()) {
    slot.m.assign(param.size(), 0.0);
    slot.v.assign(param.size(), 0.0);
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    double g = grad[i];
    if (opt.clip > 0.0) g = std::clamp(g, -opt.clip, opt.clip);
    slot.m[i] = opt.beta1 * slot.m[i] + (1.0 - opt.beta1) * g;
    slot.v[i] = opt.beta2 * slot.v[i] + (1.0 - opt.beta2) * g * g;
    const double mhat = slot.m[i] / bias1;
    const double vhat = slot.v[i] / bias2;
    param[i] -= opt.learning_rate * mhat / (std::sqrt(vhat) + opt.epsilon);
  }
}

}  // namespace detail

/// Mini-batch Adam on softmax cross-entropy. Batches are drawn from a fresh
/// permutation each epoch. Per-sample gradients are reduced in sample order,
/// so results are identical for any thread count.
inline TrainLog train(Model& model, const Samples& data, const TrainOptions& opt,
                      SeededRng& rng) {
  if (data.empty()) throw DomainError("train: empty data");
  if (opt.batch_size == 0) throw DomainError("train: batch size must be positive");
  for (std::size_t label : data.labels) {
    if (label >= model.class_count) {
      throw DomainError("train: label " + std::to_string(label) +
                        " >= class count " + std::to_string(model.class_count));
    }
  }
  TrainLog log;
  std::vector<detail::AdamSlot> weight_slots(model.layers.size());
  std::vector<detail::AdamSlot> bias_slots(model.layers.size());
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    const auto order = rng.permutation(data.size());
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size();
         start += opt.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      const std::size_t count = end - start;
      std::vector<LayerGrad> total = zero_param_grads(model);
      std::vector<double> losses(count);
      std::vector<std::size_t> hits(count);

      auto sample_grad = [&](std::size_t b, std::vector<LayerGrad>& into) {
        const std::size_t idx = order[start + b];
        const Tensor& x = data.inputs[idx];
        auto [logits, trace] = forward_with_trace(model, x);
        double value = 0.0;
        Tensor gl = detail::objective_gradient(CrossEntropyLoss{data.labels[idx]},
                                               logits, model.class_count, value);
        backpropagate(model, 0, x, trace, std::move(gl), &into);
        losses[b] = value;
        hits[b] = argmax(logits.values()) == data.labels[idx];
      };

      if (thread_count() <= 1) {
        for (std::size_t b = 0; b < count; ++b) sample_grad(b, total);
      } else {
        std::vector<std::vector<LayerGrad>> slots(count);
        parallel_for(count, [&](std::size_t b) {
          slots[b] = zero_param_grads(model);
          sample_grad(b, slots[b]);
        });
        for (std::size_t b = 0; b < count; ++b) {
          for (std::size_t l = 0; l < total.size(); ++l) {
            for (std::size_t i = 0; i < total[l].weight.size(); ++i)
              total[l].weight[i] += slots[b][l].weight[i];
            for (std::size_t i = 0; i < total[l].bias.size(); ++i)
              total[l].bias[i] += slots[b][l].bias[i];
          }
        }
      }

      double batch_loss = 0.0;
      for (std::size_t b = 0; b < count; ++b) {
        batch_loss += losses[b];
        correct += hits[b];
      }
      if (!std::isfinite(batch_loss)) {
        throw NumericalError("train: non-finite loss at epoch " +
                             std::to_string(epoch) + ", batch " +
                             std::to_string(batch_index));
      }
      loss_sum += batch_loss;

      ++step;
      const double bias1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
      const double bias2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
      const double inv = 1.0 / static_cast<double>(count);
      for (std::size_t l = 0; l < model.layers.size(); ++l) {
        Tensor* w = nullptr;
        Tensor* bvec = nullptr;
        if (auto* d = std::get_if<Dense>(&model.layers[l])) {
          w = &d->weight;
          bvec = &d->bias;
        } else if (auto* c = std::get_if<Conv2D>(&model.layers[l])) {
          w = &c->kernels;
          bvec = &c->bias;
        } else {
          continue;
        }
        for (double& g : total[l].weight.values()) g *= inv;
        for (double& g : total[l].bias.values()) g *= inv;
        detail::adam_update(w->values(), total[l].weight.values(), weight_slots[l],
                            opt, bias1, bias2);
        detail::adam_update(bvec->values(), total[l].bias.values(), bias_slots[l],
                            opt, bias1, bias2);
      }
    }
    log.epoch_loss.push_back(loss_sum / static_cast<double>(data.size()));
    log.epoch_accuracy.push_back(static_cast<double>(correct) /
                                 static_cast<double>(data.size()));
  }
  return log;
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

namespace detail {
inline Tensor he_normal(Shape shape, std::size_t fan_in, SeededRng& rng) {
  Tensor t(std::move(shape));
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.values()) v = rng.normal(0.0, std);
  return t;
}
}  // namespace detail

/// Fully connected ReLU network; `sizes` = {in, hidden..., classes}.
inline Model make_mlp(const std::vector<std::size_t>& sizes, SeededRng& rng,
                      bool with_bias = true) {
  if (sizes.size() < 2) throw DomainError("make_mlp: need at least two sizes");
  Model m;
  m.input_shape = {sizes.front()};
  m.class_count = sizes.back();
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    Dense d{detail::he_normal({sizes[i + 1], sizes[i]}, sizes[i], rng),
            Tensor({sizes[i + 1]})};
    if (with_bias)
      for (double& b : d.bias.values()) b = rng.normal(0.0, 0.1);
    m.layers.emplace_back(std::move(d));
    if (i + 2 < sizes.size()) {
      m.layers.emplace_back(ReLU{});
      m.refinable_sites.push_back(m.layers.size() - 1);
    }
  }
  return m;
}

struct CnnSpec {
  Shape input = {1, 16, 16};
  std::vector<std::size_t> conv_channels = {8, 16};
  std::size_t kernel = 3;
  std::vector<std::size_t> dense_units = {64};
  std::size_t classes = 10;
};

/// conv(k, pad k/2) -> ReLU -> maxpool(2) blocks, then Flatten and a
/// dense ReLU stack ending in a linear classifier. Every ReLU is refinable.
inline Model make_cnn(const CnnSpec& spec, SeededRng& rng) {
  Model m;
  m.input_shape = spec.input;
  m.class_count = spec.classes;
  std::size_t channels = spec.input.at(0);
  for (std::size_t f : spec.conv_channels) {
    const std::size_t fan_in = channels * spec.kernel * spec.kernel;
    m.layers.emplace_back(Conv2D{
        detail::he_normal({f, channels, spec.kernel, spec.kernel}, fan_in, rng),
        Tensor({f}), 1, spec.kernel / 2});
    m.layers.emplace_back(ReLU{});
    m.refinable_sites.push_back(m.layers.size() - 1);
    m.layers.emplace_back(MaxPool{2, 2});
    channels = f;
  }
  m.layers.emplace_back(Flatten{});
  std::size_t width = shape_volume(layer_output_shapes(m).back());
  for (std::size_t units : spec.dense_units) {
    m.layers.emplace_back(
        Dense{detail::he_normal({units, width}, width, rng), Tensor({units})});
    m.layers.emplace_back(ReLU{});
    m.refinable_sites.push_back(m.layers.size() - 1);
    width = units;
  }
  m.layers.emplace_back(
      Dense{detail::he_normal({spec.classes, width}, width, rng), Tensor({spec.classes})});
  validate(m);
  return m;
}

}  // namespace clever_prune
