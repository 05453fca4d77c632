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

// Layer attributions whose scores decompose over the next layer's units as
//
//   R_i = sum_j R_ij,   R_ij = a_i rho(w_ij) d_j
//
// for Gradient x Input, Integrated Gradients (straight path from the origin)
// and the generic LRP rule with rho(t) = t + gamma max(0, t).

#pragma once

#include <cstdio>
#include <ostream>
#include <variant>
#include <vector>

#include "clever_prune/model.hpp"

namespace clever_prune {

struct GradientXInput {};

struct IntegratedGradients {
  std::size_t steps = 64;
};

struct Lrp {
  double gamma = 0.0;
  double epsilon = 0.0;
};

using AttributionMethod = std::variant<GradientXInput, IntegratedGradients, Lrp>;

/// Unit-wise relevance of every layer output for one explained logit.
struct RelevanceMap {
  std::size_t target = 0;
  Tensor input;
  std::vector<Tensor> layers;  // relevance of the output of layer l

  const Tensor& at(std::size_t site) const {
    return site == kInputSite ? input : layers.at(site);
  }
};

namespace detail {

inline void check_target(const Model& model, std::size_t target) {
  if (target >= model.class_count) {
    throw DomainError("target " + std::to_string(target) + " >= class count " +
                      std::to_string(model.class_count));
  }
}

inline void check_site(const Model& model, std::size_t site) {
  if (site != kInputSite && site >= model.layers.size()) {
    throw PreconditionError("invalid layer index " + std::to_string(site) +
                            " for a model with " +
                            std::to_string(model.layers.size()) + " layers");
  }
}

inline std::size_t first_layer_after(std::size_t site) {
  return site == kInputSite ? 0 : site + 1;
}

inline double lrp_rho(double w, double gamma) { return w + gamma * std::max(0.0, w); }

inline Tensor lrp_rho(const Tensor& w, double gamma) {
  Tensor r = w;
  for (double& v : r.values()) v = lrp_rho(v, gamma);
  return r;
}

// R_j / (z_j + eps sign(z_j)); zero where R_j is zero.
inline double lrp_ratio(double relevance, double z, double epsilon) {
  if (relevance == 0.0) return 0.0;
  const double denom = z + epsilon * (z >= 0.0 ? 1.0 : -1.0);
  if (denom == 0.0) {
    throw NumericalError(
        "LRP: zero denominator with epsilon = 0; use an epsilon > 0 stabilizer");
  }
  return relevance / denom;
}

// d y / d(activation at site), evaluated with `activation` substituted at
// the site. Also returns d y / d(output of every later layer).
inline Gradients site_gradient(const Model& model, std::size_t site,
                               const Tensor& activation, std::size_t target) {
  const std::size_t first = first_layer_after(site);
  if (first == model.layers.size()) {
    // The site is the logit layer itself.
    Gradients g;
    g.logits = activation;
    g.objective = activation[target];
    g.wrt_input = Tensor(activation.shape());
    g.wrt_input[target] = 1.0;
    return g;
  }
  ActivationTrace trace = forward_trace_from(model, first, activation);
  Tensor grad_logits(trace.logits().shape());
  grad_logits[target] = 1.0;
  Gradients g = backpropagate(model, first, activation, trace,
                              std::move(grad_logits), nullptr);
  g.logits = trace.logits();
  g.objective = trace.logits()[target];
  return g;
}

}  // namespace detail

/// R_i = a_i dy/da_i at the site (layer output index or kInputSite).
inline Tensor gradient_x_input(const Model& model, const Tensor& x,
                               std::size_t target, std::size_t site) {
  detail::check_target(model, target);
  detail::check_site(model, site);
  auto [logits, trace] = forward_with_trace(model, x);
  const Tensor& a = site_activation(trace, x, site);
  const Gradients g = detail::site_gradient(model, site, a, target);
  Tensor r = a;
  for (std::size_t i = 0; i < r.size(); ++i) r[i] *= g.wrt_input[i];
  return r;
}

/// R_i = a_i * mean_t dy/da_i(t a), midpoint rule with t_k = (k + 1/2)/steps.
inline Tensor integrated_gradients(const Model& model, const Tensor& x,
                                   std::size_t target, std::size_t site,
                                   std::size_t steps) {
  detail::check_target(model, target);
  detail::check_site(model, site);
  if (steps < 1) throw DomainError("integrated gradients needs steps >= 1");
  auto [logits, trace] = forward_with_trace(model, x);
  const Tensor& a = site_activation(trace, x, site);
  Tensor mean_grad(a.shape());
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = (static_cast<double>(k) + 0.5) / static_cast<double>(steps);
    const Gradients g = detail::site_gradient(model, site, t * a, target);
    for (std::size_t i = 0; i < a.size(); ++i) mean_grad[i] += g.wrt_input[i];
  }
  Tensor r = a;
  for (std::size_t i = 0; i < r.size(); ++i)
    r[i] *= mean_grad[i] / static_cast<double>(steps);
  return r;
}

namespace detail {

// Generic LRP rule through one layer; returns the relevance of its input.
inline Tensor lrp_layer(const Layer& layer, const Tensor& in, const Tensor& out,
                        const Tensor& r_out, const Lrp& rule) {
  return std::visit(
      [&](const auto& l) -> Tensor {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Dense>) {
          const std::size_t n_out = l.out_features(), n_in = l.in_features();
          Tensor r_in({n_in});
          for (std::size_t j = 0; j < n_out; ++j) {
            if (r_out[j] == 0.0) continue;
            const double* row = l.weight.data() + j * n_in;
            double z = 0.0;
            for (std::size_t i = 0; i < n_in; ++i) z += in[i] * lrp_rho(row[i], rule.gamma);
            const double s = lrp_ratio(r_out[j], z, rule.epsilon);
            for (std::size_t i = 0; i < n_in; ++i)
              r_in[i] += in[i] * lrp_rho(row[i], rule.gamma) * s;
          }
          return r_in;
        } else if constexpr (std::is_same_v<T, Conv2D>) {
          const Tensor rho_k = lrp_rho(l.kernels, rule.gamma);
          const Tensor z = conv2d(in, rho_k, Tensor(l.bias.shape()), l.stride, l.pad);
          Tensor s(z.shape());
          for (std::size_t j = 0; j < z.size(); ++j)
            s[j] = lrp_ratio(r_out[j], z[j], rule.epsilon);
          Tensor c = conv2d_transpose(s, rho_k, in.shape(), l.stride, l.pad);
          for (std::size_t i = 0; i < c.size(); ++i) c[i] *= in[i];
          return c;
        } else if constexpr (std::is_same_v<T, MaxPool>) {
          const auto idx = maxpool_argmax(in, l, out.shape());
          Tensor r_in(in.shape());
          for (std::size_t o = 0; o < idx.size(); ++o) r_in[idx[o]] += r_out[o];
          return r_in;
        } else if constexpr (std::is_same_v<T, Flatten>) {
          return r_out.reshaped(in.shape());
        } else if constexpr (std::is_same_v<T, PcaScale>) {
          // Linear map M = U diag(c) U^T applied per position; the mean
          // offset acts as a bias and is excluded from the denominator.
          const std::size_t n = in.extent(0);
          const std::size_t positions = in.size() / n;
          const Tensor& m = l.projector();
          Tensor r_in(in.shape());
          for (std::size_t p = 0; p < positions; ++p) {
            for (std::size_t j = 0; j < n; ++j) {
              const double rj = r_out[j * positions + p];
              if (rj == 0.0) continue;
              double z = 0.0;
              for (std::size_t i = 0; i < n; ++i)
                z += in[i * positions + p] * lrp_rho(m(j, i), rule.gamma);
              const double s = lrp_ratio(rj, z, rule.epsilon);
              for (std::size_t i = 0; i < n; ++i)
                r_in[i * positions + p] += in[i * positions + p] * lrp_rho(m(j, i), rule.gamma) * s;
            }
          }
          return r_in;
        } else {
          // ReLU and Scale hand relevance through unit by unit.
          return r_out;
        }
      },
      layer);
}

}  // namespace detail

/// Relevance at every layer, starting from y_target on the target logit.
/// Convolutions use the rule of their unrolled linear form; max-pooling
/// routes relevance to the winning input.
inline RelevanceMap lrp(const Model& model, const Tensor& x, std::size_t target,
                        const Lrp& rule) {
  detail::check_target(model, target);
  if (rule.gamma < 0.0 || rule.epsilon < 0.0) {
    throw DomainError("LRP gamma and epsilon must be non-negative");
  }
  auto [logits, trace] = forward_with_trace(model, x);
  RelevanceMap map;
  map.target = target;
  map.layers.resize(model.layers.size());
  Tensor r(logits.shape());
  r[target] = logits[target];
  for (std::size_t l = model.layers.size(); l-- > 0;) {
    map.layers[l] = r;
    r = detail::lrp_layer(model.layers[l], layer_input(trace, x, l),
                          trace.outputs[l], r, rule);
  }
  map.input = std::move(r);
  return map;
}

/// Decomposition of the site relevance over the units of the next Dense
/// layer (the "consumer", reached through at most one Flatten).
struct MessageFactors {
  std::size_t site = kInputSite;
  std::size_t consumer = 0;   // index of the Dense layer
  Tensor activations;         // a_i, flattened input of the consumer
  Tensor rho_weights;         // rho(w) as [out x in]
  Tensor d;                   // d_j per consumer output unit

  std::size_t inputs() const { return activations.size(); }
  std::size_t outputs() const { return d.size(); }

  double edge(std::size_t i, std::size_t j) const {
    return activations[i] * rho_weights(j, i) * d[j];
  }

  /// R_ij as an [in x out] matrix.
  Tensor edges() const {
    Tensor e({inputs(), outputs()});
    for (std::size_t i = 0; i < inputs(); ++i)
      for (std::size_t j = 0; j < outputs(); ++j) e(i, j) = edge(i, j);
    return e;
  }

  /// R_i = sum_j R_ij, flattened.
  Tensor unit_relevance() const {
    Tensor r({inputs()});
    for (std::size_t i = 0; i < inputs(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < outputs(); ++j) s += rho_weights(j, i) * d[j];
      r[i] = activations[i] * s;
    }
    return r;
  }
};

/// Index of the Dense layer consuming the activation at `site`; throws if
/// anything other than a Flatten sits between them.
inline std::size_t consumer_layer(const Model& model, std::size_t site) {
  detail::check_site(model, site);
  for (std::size_t l = detail::first_layer_after(site); l < model.layers.size(); ++l) {
    if (std::holds_alternative<Dense>(model.layers[l])) return l;
    if (!std::holds_alternative<Flatten>(model.layers[l])) break;
  }
  throw PreconditionError("site " + std::to_string(site) +
                          " is not followed by a Dense layer; message factors "
                          "need a dense consumer");
}

inline MessageFactors message_factors(const Model& model, const Tensor& x,
                                      std::size_t target, std::size_t site,
                                      const AttributionMethod& method) {
  detail::check_target(model, target);
  const std::size_t consumer = consumer_layer(model, site);
  const Dense& dense = std::get<Dense>(model.layers[consumer]);
  auto [logits, trace] = forward_with_trace(model, x);
  const Tensor& a_site = site_activation(trace, x, site);

  MessageFactors mf;
  mf.site = site;
  mf.consumer = consumer;
  mf.activations = a_site.reshaped({a_site.size()});
  mf.d = Tensor({dense.out_features()});

  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, GradientXInput>) {
          mf.rho_weights = dense.weight;
          const Gradients g = detail::site_gradient(model, site, a_site, target);
          mf.d = g.wrt_outputs[consumer];
        } else if constexpr (std::is_same_v<T, IntegratedGradients>) {
          if (m.steps < 1) throw DomainError("integrated gradients needs steps >= 1");
          mf.rho_weights = dense.weight;
          for (std::size_t k = 0; k < m.steps; ++k) {
            const double t = (static_cast<double>(k) + 0.5) / static_cast<double>(m.steps);
            const Gradients g = detail::site_gradient(model, site, t * a_site, target);
            for (std::size_t j = 0; j < mf.d.size(); ++j) mf.d[j] += g.wrt_outputs[consumer][j];
          }
          for (double& v : mf.d.values()) v /= static_cast<double>(m.steps);
        } else {
          mf.rho_weights = detail::lrp_rho(dense.weight, m.gamma);
          const RelevanceMap map = lrp(model, x, target, m);
          const Tensor& r_out = map.layers[consumer];
          for (std::size_t j = 0; j < mf.d.size(); ++j) {
            double z = 0.0;
            for (std::size_t i = 0; i < mf.inputs(); ++i)
              z += mf.activations[i] * mf.rho_weights(j, i);
            mf.d[j] = detail::lrp_ratio(r_out[j], z, m.epsilon);
          }
        }
      },
      method);
  return mf;
}

/// Relevance at one site for any of the three methods.
inline Tensor attribute(const Model& model, const Tensor& x, std::size_t target,
                        std::size_t site, const AttributionMethod& method) {
  return std::visit(
      [&](const auto& m) -> Tensor {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, GradientXInput>) {
          return gradient_x_input(model, x, target, site);
        } else if constexpr (std::is_same_v<T, IntegratedGradients>) {
          return integrated_gradients(model, x, target, site, m.steps);
        } else {
          detail::check_site(model, site);
          return lrp(model, x, target, m).at(site);
        }
      },
      method);
}

/// CSV with columns layer,unit,R; the input is written as layer "input".
inline void write_relevance_csv(std::ostream& os, const RelevanceMap& map) {
  os << "layer,unit,R\n";
  char buf[64];
  auto emit = [&](const std::string& layer, const Tensor& r) {
    for (std::size_t u = 0; u < r.size(); ++u) {
      std::snprintf(buf, sizeof buf, "%.17g", r[u]);
      os << layer << ',' << u << ',' << buf << '\n';
    }
  };
  emit("input", map.input);
  for (std::size_t l = 0; l < map.layers.size(); ++l) emit(std::to_string(l), map.layers[l]);
}

}  // namespace clever_prune
