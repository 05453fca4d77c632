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

// Exposure-minimising refinement of a trained model from a small clean
// sample set.
//
// Explanation-guided rules soft-prune activations with coefficients
//
//   c_i = E[a_i^2] / (E[a_i^2] + lambda)                      (per unit)
//   w_ij <- E[a_i^2 d_j^2] / (E[a_i^2 d_j^2] + lambda E[d_j^2]) w_ij   (per edge)
//   c_k = E[h_k^2] / (E[h_k^2] + lambda),  h = U^T (a - mean)  (PCA space)
//
// and response-guided / label-guided refits replace the last dense layer by
// (Sigma + lambda I)^-1 Sigma w_old or by a ridge solution on one-hot labels.
// For convolutional sites the per-unit rule works on channels: statistics use
// the spatial sum of each channel, and the coefficient scales the whole map.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "clever_prune/attribution.hpp"
#include "clever_prune/linalg.hpp"
#include "clever_prune/model.hpp"

namespace clever_prune {

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// E[a_i^2 d_j^2] and E[d_j^2] for the edges into a site's dense consumer.
struct WeightedMoments {
  Tensor activation_message;  // [in x out]
  Tensor message;             // [out]
};

struct SiteStats {
  std::size_t site = 0;
  bool per_channel = false;
  Tensor second_moment;  // E[a_i^2]; channel spatial sums for feature maps
  std::optional<WeightedMoments> weighted;
};

struct ActivationStats {
  std::vector<SiteStats> sites;
  // E[x x^T] and E[x] over the input features of the last (dense) layer.
  Tensor gram;
  Tensor feature_mean;
  std::size_t sample_count = 0;

  const SiteStats& at(std::size_t site) const {
    for (const auto& s : sites)
      if (s.site == site) return s;
    throw PreconditionError("no statistics collected for site " + std::to_string(site));
  }
  SiteStats& at(std::size_t site) {
    return const_cast<SiteStats&>(std::as_const(*this).at(site));
  }
};

namespace detail {

inline void check_refinable(const Model& model, std::size_t site) {
  if (std::find(model.refinable_sites.begin(), model.refinable_sites.end(), site) ==
      model.refinable_sites.end()) {
    throw PreconditionError("layer " + std::to_string(site) + " is not a refinable site");
  }
}

// Per-unit summary of an activation: itself for vectors, spatial sums of
// each channel for feature maps.
inline std::vector<double> unit_summary(const Tensor& a) {
  if (a.rank() == 1) return {a.values().begin(), a.values().end()};
  const std::size_t channels = a.extent(0);
  const std::size_t positions = a.size() / channels;
  std::vector<double> s(channels, 0.0);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t p = 0; p < positions; ++p) s[c] += a[c * positions + p];
  return s;
}

}  // namespace detail

/// Input features of the final Dense layer, one row per sample.
inline Tensor last_layer_features(const Model& model, const std::vector<Tensor>& inputs) {
  if (model.layers.empty() || !std::holds_alternative<Dense>(model.layers.back())) {
    throw PreconditionError("model does not end with a dense layer");
  }
  if (inputs.empty()) throw DomainError("no samples to extract features from");
  const std::size_t last = model.layers.size() - 1;
  const std::size_t n = std::get<Dense>(model.layers.back()).in_features();
  Tensor x({inputs.size(), n});
  parallel_for(inputs.size(), [&](std::size_t s) {
    auto [logits, trace] = forward_with_trace(model, inputs[s]);
    const Tensor& f = layer_input(trace, inputs[s], last);
    std::copy(f.values().begin(), f.values().end(), x.data() + s * n);
  });
  return x;
}

/// Second moments at each site plus the last-layer Gram matrix.
inline ActivationStats collect_stats(const Model& model, const std::vector<Tensor>& inputs,
                                     const std::vector<std::size_t>& sites) {
  if (inputs.empty()) throw DomainError("collect_stats: empty data");
  for (std::size_t site : sites) detail::check_refinable(model, site);
  const std::size_t count = inputs.size();

  std::vector<std::vector<std::vector<double>>> per_sample(count);
  std::vector<bool> conv(sites.size(), false);
  parallel_for(count, [&](std::size_t s) {
    auto [logits, trace] = forward_with_trace(model, inputs[s]);
    per_sample[s].resize(sites.size());
    for (std::size_t k = 0; k < sites.size(); ++k)
      per_sample[s][k] = detail::unit_summary(trace.outputs[sites[k]]);
  });
  {
    const auto shapes = layer_output_shapes(model);
    for (std::size_t k = 0; k < sites.size(); ++k) conv[k] = shapes[sites[k]].size() == 3;
  }

  ActivationStats stats;
  stats.sample_count = count;
  for (std::size_t k = 0; k < sites.size(); ++k) {
    const std::size_t units = per_sample[0][k].size();
    Tensor m({units});
    for (std::size_t s = 0; s < count; ++s)
      for (std::size_t i = 0; i < units; ++i) m[i] += per_sample[s][k][i] * per_sample[s][k][i];
    for (double& v : m.values()) v /= static_cast<double>(count);
    stats.sites.push_back({sites[k], conv[k], std::move(m), std::nullopt});
  }

  if (!model.layers.empty() && std::holds_alternative<Dense>(model.layers.back())) {
    const Tensor x = last_layer_features(model, inputs);
    const std::size_t n = x.extent(1);
    stats.gram = Tensor({n, n});
    stats.feature_mean = Tensor({n});
    for (std::size_t s = 0; s < count; ++s) {
      const double* row = x.data() + s * n;
      for (std::size_t i = 0; i < n; ++i) {
        stats.feature_mean[i] += row[i];
        if (row[i] == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) stats.gram(i, j) += row[i] * row[j];
      }
    }
    for (double& v : stats.gram.values()) v /= static_cast<double>(count);
    for (double& v : stats.feature_mean.values()) v /= static_cast<double>(count);
  }
  return stats;
}

/// E[a_i^2 d_j^2] and E[d_j^2] at a site, explaining each sample's label.
inline WeightedMoments collect_weighted_moments(const Model& model, const Samples& data,
                                                std::size_t site,
                                                const AttributionMethod& method = GradientXInput{}) {
  if (data.empty()) throw DomainError("collect_weighted_moments: empty data");
  std::vector<MessageFactors> factors(data.size());
  parallel_for(data.size(), [&](std::size_t s) {
    factors[s] = message_factors(model, data.inputs[s], data.labels[s], site, method);
  });
  const std::size_t in = factors[0].inputs(), out = factors[0].outputs();
  WeightedMoments wm{Tensor({in, out}), Tensor({out})};
  for (const auto& f : factors) {
    for (std::size_t j = 0; j < out; ++j) {
      const double d2 = f.d[j] * f.d[j];
      wm.message[j] += d2;
      for (std::size_t i = 0; i < in; ++i)
        wm.activation_message(i, j) += f.activations[i] * f.activations[i] * d2;
    }
  }
  const double inv = 1.0 / static_cast<double>(data.size());
  for (double& v : wm.activation_message.values()) v *= inv;
  for (double& v : wm.message.values()) v *= inv;
  return wm;
}

// ---------------------------------------------------------------------------
// Explanation-guided soft pruning
// ---------------------------------------------------------------------------

/// Soft-pruning factor energy / (energy + lambda). lambda = 0 means no
/// refinement (factor 1); a unit with zero energy is fully pruned for any
/// lambda > 0.
inline double pruning_factor(double energy, double lambda, double weight = 1.0) {
  if (lambda == 0.0) return 1.0;
  const double denom = energy + lambda * weight;
  return denom > 0.0 ? energy / denom : 0.0;
}

inline Tensor egem_coefficients(std::span<const double> second_moments, double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw DomainError("lambda must be finite and non-negative, got " + std::to_string(lambda));
  }
  if (second_moments.empty()) throw DomainError("egem_coefficients: no units");
  Tensor c({second_moments.size()});
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = pruning_factor(second_moments[i], lambda);
  return c;
}

inline Tensor egem_coefficients(const SiteStats& stats, double lambda) {
  return egem_coefficients(stats.second_moment.values(), lambda);
}

/// Per-edge closed form for the layer-wise explanation-matching objective.
/// `w_old` is [out x in]; the moments index edges as [in x out].
inline Tensor egem_full_weights(const Tensor& w_old, const WeightedMoments& moments,
                                double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw DomainError("lambda must be finite and non-negative");
  }
  const std::size_t out = w_old.extent(0), in = w_old.extent(1);
  if (moments.activation_message.shape() != Shape{in, out} || moments.message.size() != out) {
    throw DimensionError("weighted moments " +
                         shape_string(moments.activation_message.shape()) +
                         " do not match weights " + shape_string(w_old.shape()));
  }
  Tensor w = w_old;
  for (std::size_t j = 0; j < out; ++j)
    for (std::size_t i = 0; i < in; ++i)
      w(j, i) *= pruning_factor(moments.activation_message(i, j), lambda, moments.message[j]);
  return w;
}

inline Tensor egem_full_weights(const Tensor& w_old, const SiteStats& stats, double lambda) {
  if (!stats.weighted) {
    throw PreconditionError("site " + std::to_string(stats.site) +
                            " has no weighted second moments; collect them first");
  }
  return egem_full_weights(w_old, *stats.weighted, lambda);
}

/// Objective of the per-edge problem for one weight matrix, evaluated from
/// the sufficient statistics: sum_ij (w_ij - w_old_ij)^2 E[a^2 d^2] + lambda w_ij^2 E[d^2].
inline double egem_objective(const Tensor& w, const Tensor& w_old,
                             const WeightedMoments& moments, double lambda) {
  double total = 0.0;
  for (std::size_t j = 0; j < w.extent(0); ++j) {
    for (std::size_t i = 0; i < w.extent(1); ++i) {
      const double diff = w(j, i) - w_old(j, i);
      total += diff * diff * moments.activation_message(i, j) +
               lambda * w(j, i) * w(j, i) * moments.message[j];
    }
  }
  return total;
}

namespace detail {

// Position after the site and any refinement layers already attached to it.
inline std::size_t refinement_slot(const Model& model, std::size_t site) {
  std::size_t pos = site + 1;
  while (pos < model.layers.size() && is_refinement_layer(model.layers[pos])) ++pos;
  return pos;
}

inline Model insert_layer(const Model& model, std::size_t pos, Layer layer) {
  Model out = model;
  out.layers.insert(out.layers.begin() + static_cast<std::ptrdiff_t>(pos), std::move(layer));
  for (std::size_t& s : out.refinable_sites)
    if (s >= pos) ++s;
  return out;
}

}  // namespace detail

/// Inserts a Scale(c) directly after the site, or multiplies c into a Scale
/// already in that position.
inline Model apply_scaling(const Model& model, std::size_t site, const Tensor& c) {
  detail::check_refinable(model, site);
  for (double v : c.values()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DomainError("scaling coefficient " + std::to_string(v) + " outside [0, 1]");
    }
  }
  const Shape site_shape = layer_output_shapes(model)[site];
  if (c.size() != site_shape[0]) {
    throw DimensionError("scaling with " + std::to_string(c.size()) +
                         " coefficients at site of shape " + shape_string(site_shape));
  }
  const std::size_t pos = detail::refinement_slot(model, site);
  if (pos > site + 1) {
    if (auto* existing = std::get_if<Scale>(&model.layers[pos - 1])) {
      Model out = model;
      Scale& s = std::get<Scale>(out.layers[pos - 1]);
      for (std::size_t i = 0; i < c.size(); ++i) s.coefficients[i] *= c[i];
      (void)existing;
      return out;
    }
  }
  return detail::insert_layer(model, pos, Scale{c.reshaped({c.size()})});
}

/// Equivalent of apply_scaling that keeps the topology and instead scales
/// the weights leaving the site (through any max-pool/flatten in between).
inline Model scale_outgoing_weights(const Model& model, std::size_t site, const Tensor& c) {
  detail::check_refinable(model, site);
  const auto shapes = layer_output_shapes(model);
  Model out = model;
  Shape current = shapes[site];
  for (std::size_t l = site + 1; l < out.layers.size(); ++l) {
    Layer& layer = out.layers[l];
    if (auto* d = std::get_if<Dense>(&layer)) {
      const std::size_t channels = c.size();
      const std::size_t per = d->in_features() / channels;
      for (std::size_t j = 0; j < d->out_features(); ++j)
        for (std::size_t i = 0; i < d->in_features(); ++i) d->weight(j, i) *= c[i / per];
      return out;
    }
    if (auto* conv = std::get_if<Conv2D>(&layer)) {
      const Shape& ks = conv->kernels.shape();
      const std::size_t per = ks[2] * ks[3];
      for (std::size_t f = 0; f < ks[0]; ++f)
        for (std::size_t ch = 0; ch < ks[1]; ++ch)
          for (std::size_t k = 0; k < per; ++k) conv->kernels[(f * ks[1] + ch) * per + k] *= c[ch];
      return out;
    }
    if (!std::holds_alternative<MaxPool>(layer) && !std::holds_alternative<Flatten>(layer)) {
      break;
    }
    current = shapes[l];
  }
  throw PreconditionError("no dense or convolutional consumer after site " +
                          std::to_string(site));
}

// ---------------------------------------------------------------------------
// PCA-space pruning
// ---------------------------------------------------------------------------

/// Activation vectors at a site: one row per sample for vector sites, one row
/// per (sample, spatial position) channel vector for feature maps.
inline Tensor site_vectors(const Model& model, const std::vector<Tensor>& inputs,
                           std::size_t site) {
  if (inputs.empty()) throw DomainError("site_vectors: empty data");
  const Shape shape = layer_output_shapes(model).at(site);
  const std::size_t n = shape[0];
  const std::size_t positions = shape_volume(shape) / n;
  Tensor rows({inputs.size() * positions, n});
  parallel_for(inputs.size(), [&](std::size_t s) {
    auto [logits, trace] = forward_with_trace(model, inputs[s]);
    const Tensor& a = trace.outputs[site];
    for (std::size_t p = 0; p < positions; ++p)
      for (std::size_t i = 0; i < n; ++i) rows(s * positions + p, i) = a[i * positions + p];
  });
  return rows;
}

/// Eigen-decomposition of the sample covariance (divisor N), full rank.
inline PcaBasis fit_pca(const Tensor& rows) {
  if (rows.rank() != 2) throw DimensionError("fit_pca expects [samples x dim]");
  const std::size_t count = rows.extent(0), n = rows.extent(1);
  if (count < 2) throw DomainError("fit_pca needs at least 2 samples");
  Tensor mean({n});
  for (std::size_t s = 0; s < count; ++s)
    for (std::size_t i = 0; i < n; ++i) mean[i] += rows(s, i);
  for (double& v : mean.values()) v /= static_cast<double>(count);
  Tensor cov({n, n});
  std::vector<double> centered(n);
  for (std::size_t s = 0; s < count; ++s) {
    for (std::size_t i = 0; i < n; ++i) centered[i] = rows(s, i) - mean[i];
    for (std::size_t i = 0; i < n; ++i) {
      if (centered[i] == 0.0) continue;
      for (std::size_t j = i; j < n; ++j) cov(i, j) += centered[i] * centered[j];
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      cov(i, j) /= static_cast<double>(count);
      cov(j, i) = cov(i, j);
    }
  SymmetricEigen eig = symmetric_eigen(cov);
  for (double& v : eig.values.values()) v = std::max(v, 0.0);
  return PcaBasis{std::move(eig.vectors), std::move(mean), std::move(eig.values)};
}

/// E[h_k^2] with h = U^T (a - mean) over the given rows.
inline Tensor pca_second_moments(const PcaBasis& basis, const Tensor& rows) {
  const std::size_t n = basis.dim(), k = basis.rank();
  if (rows.rank() != 2 || rows.extent(1) != n) {
    throw DimensionError("rows " + shape_string(rows.shape()) +
                         " do not match basis dimension " + std::to_string(n));
  }
  Tensor m({k});
  std::vector<double> centered(n);
  for (std::size_t s = 0; s < rows.extent(0); ++s) {
    for (std::size_t i = 0; i < n; ++i) centered[i] = rows(s, i) - basis.mean[i];
    for (std::size_t q = 0; q < k; ++q) {
      double h = 0.0;
      for (std::size_t i = 0; i < n; ++i) h += basis.components(i, q) * centered[i];
      m[q] += h * h;
    }
  }
  for (double& v : m.values()) v /= static_cast<double>(rows.extent(0));
  return m;
}

/// Inserts a PcaScale after the site with c_k = E[h_k^2] / (E[h_k^2] + lambda),
/// the moments taken over `rows` (see site_vectors).
inline Model apply_pca_egem(const Model& model, std::size_t site, const PcaBasis& basis,
                            double lambda, const Tensor& rows) {
  detail::check_refinable(model, site);
  const Shape site_shape = layer_output_shapes(model)[site];
  if (basis.dim() != site_shape[0]) {
    throw DimensionError("PCA basis of dimension " + std::to_string(basis.dim()) +
                         " does not match site of shape " + shape_string(site_shape));
  }
  const Tensor moments = pca_second_moments(basis, rows);
  Tensor c = egem_coefficients(moments.values(), lambda);
  return detail::insert_layer(model, detail::refinement_slot(model, site),
                              PcaScale(basis, std::move(c)));
}

// ---------------------------------------------------------------------------
// Last-layer refits
// ---------------------------------------------------------------------------

/// (Sigma + lambda diag(penalty))^-1 Sigma w_old, with w_old [n x outputs].
/// An empty penalty means the identity.
inline Tensor rgem_weights(const Tensor& sigma, const Tensor& w_old, double lambda,
                           std::span<const double> penalty = {}) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw DomainError("lambda must be >= 0");
  const std::size_t n = sigma.extent(0);
  Tensor a = sigma;
  for (std::size_t i = 0; i < n; ++i) a(i, i) += lambda * (penalty.empty() ? 1.0 : penalty[i]);
  try {
    return cholesky_solve(a, matmul(sigma, w_old));
  } catch (const NumericalError& e) {
    throw NumericalError(std::string(e.what()) + "; use lambda > 0");
  }
}

namespace detail {

struct AugmentedFeatures {
  Tensor gram;   // [(n+1) x (n+1)] of [x, 1]
  Tensor x;      // [N x (n+1)]
  std::vector<double> penalty;
};

inline AugmentedFeatures augmented_features(const Model& model,
                                            const std::vector<Tensor>& inputs) {
  const Tensor feats = last_layer_features(model, inputs);
  const std::size_t count = feats.extent(0), n = feats.extent(1);
  AugmentedFeatures af{Tensor({n + 1, n + 1}), Tensor({count, n + 1}),
                       std::vector<double>(n + 1, 1.0)};
  af.penalty[n] = 0.0;
  for (std::size_t s = 0; s < count; ++s) {
    for (std::size_t i = 0; i < n; ++i) af.x(s, i) = feats(s, i);
    af.x(s, n) = 1.0;
  }
  for (std::size_t s = 0; s < count; ++s) {
    const double* row = af.x.data() + s * (n + 1);
    for (std::size_t i = 0; i <= n; ++i) {
      if (row[i] == 0.0) continue;
      for (std::size_t j = 0; j <= n; ++j) af.gram(i, j) += row[i] * row[j];
    }
  }
  for (double& v : af.gram.values()) v /= static_cast<double>(count);
  return af;
}

// Writes [W^T; b^T] ((n+1) x out) back into the final Dense layer.
inline Model with_last_layer(const Model& model, const Tensor& augmented) {
  Model out = model;
  Dense& d = std::get<Dense>(out.layers.back());
  const std::size_t n = d.in_features();
  for (std::size_t j = 0; j < d.out_features(); ++j) {
    for (std::size_t i = 0; i < n; ++i) d.weight(j, i) = augmented(i, j);
    d.bias[j] = augmented(n, j);
  }
  return out;
}

}  // namespace detail

/// Response-guided refit of the last dense layer on the available inputs.
/// The bias enters as a constant feature excluded from the penalty.
inline Model rgem_refit(const Model& model, const std::vector<Tensor>& inputs, double lambda) {
  const auto af = detail::augmented_features(model, inputs);
  const Dense& d = std::get<Dense>(model.layers.back());
  const std::size_t n = d.in_features();
  Tensor w_old({n + 1, d.out_features()});
  for (std::size_t j = 0; j < d.out_features(); ++j) {
    for (std::size_t i = 0; i < n; ++i) w_old(i, j) = d.weight(j, i);
    w_old(n, j) = d.bias[j];
  }
  return detail::with_last_layer(model, rgem_weights(af.gram, w_old, lambda, af.penalty));
}

/// Ridge regression of one-hot labels on the last-layer features:
/// (E[x x^T] + lambda P)^-1 E[x y^T], bias unpenalised.
inline Model ridge_refit(const Model& model, const Samples& data, double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw DomainError("lambda must be >= 0");
  const auto af = detail::augmented_features(model, data.inputs);
  const std::size_t dim = af.gram.extent(0), count = data.size();
  Tensor rhs({dim, model.class_count});
  for (std::size_t s = 0; s < count; ++s) {
    if (data.labels[s] >= model.class_count) throw DomainError("label out of range");
    for (std::size_t i = 0; i < dim; ++i) rhs(i, data.labels[s]) += af.x(s, i);
  }
  for (double& v : rhs.values()) v /= static_cast<double>(count);
  Tensor a = af.gram;
  for (std::size_t i = 0; i < dim; ++i) a(i, i) += lambda * af.penalty[i];
  try {
    return detail::with_last_layer(model, cholesky_solve(a, rhs));
  } catch (const NumericalError& e) {
    throw NumericalError(std::string(e.what()) + "; use lambda > 0");
  }
}

struct RetrainOptions {
  TrainOptions train{};
  std::uint64_t seed = 0;
};

/// Fine-tunes every layer of a copy of the model.
inline Model retrain(const Model& model, const Samples& data, const RetrainOptions& opt) {
  Model copy = model;
  SeededRng rng(opt.seed);
  train(copy, data, opt.train, rng);
  return copy;
}

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

enum class Method { kOriginal, kEgem, kEgemFull, kPcaEgem, kRgem, kRidge, kRetrain };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::kOriginal: return "original";
    case Method::kEgem: return "egem";
    case Method::kEgemFull: return "egem-full";
    case Method::kPcaEgem: return "pca-egem";
    case Method::kRgem: return "rgem";
    case Method::kRidge: return "ridge";
    case Method::kRetrain: return "retrain";
  }
  return "unknown";
}

inline Method parse_method(const std::string& name) {
  for (Method m : {Method::kOriginal, Method::kEgem, Method::kEgemFull, Method::kPcaEgem,
                   Method::kRgem, Method::kRidge, Method::kRetrain}) {
    if (method_name(m) == name) return m;
  }
  throw ConfigError("unknown method '" + name + "'");
}

/// What a refinement did: the method, its scalar strength (alpha for the
/// explanation-guided rules, lambda for last-layer refits, epochs for
/// Retrain) and the per-site lambdas actually applied.
struct RefinementPlan {
  Method method = Method::kOriginal;
  double strength = 0.0;
  std::vector<std::size_t> sites;
  std::vector<double> site_lambdas;
};

}  // namespace clever_prune
