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

// Choosing refinement strength: per-layer target pruning factors, the lambda
// that reaches them, and slack-based selection over a candidate grid.

#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <utility>
#include <vector>

#include "clever_prune/refine.hpp"

namespace clever_prune {

struct Schedule {
  double alpha = 1.0;
  Tensor thresholds;
};

/// tau_l = 1 - (1 - alpha)(l - 1)/(L - 1); a single layer gets alpha.
inline Schedule triangular_thresholds(double alpha, std::size_t layers) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw DomainError("alpha must lie in (0, 1], got " + std::to_string(alpha));
  }
  if (layers == 0) throw DomainError("triangular_thresholds needs at least one layer");
  Schedule s{alpha, Tensor({layers})};
  if (layers == 1) {
    s.thresholds[0] = alpha;
    return s;
  }
  for (std::size_t l = 0; l < layers; ++l) {
    s.thresholds[l] = 1.0 - (1.0 - alpha) * static_cast<double>(l) /
                                static_cast<double>(layers - 1);
  }
  return s;
}

struct LambdaSolution {
  double lambda = 0.0;
  bool all_dead = false;     // mean factor is zero for every lambda
  bool unreachable = false;  // tau below what any finite lambda attains
};

/// Smallest lambda (to bisection precision) with mean_factor(lambda) <= tau.
/// Doubling from 1e-8 brackets the target; 40 bisection steps refine it.
inline LambdaSolution solve_lambda(const std::function<double(double)>& mean_factor,
                                   double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) {
    throw DomainError("tau must lie in (0, 1], got " + std::to_string(tau));
  }
  LambdaSolution out;
  if (tau == 1.0) return out;
  constexpr double kStart = 1e-8;
  constexpr double kCeiling = 1e300;
  if (mean_factor(kStart) == 0.0) {
    out.all_dead = true;
    return out;
  }
  double lo = 0.0, hi = kStart;
  while (mean_factor(hi) > tau) {
    lo = hi;
    hi *= 2.0;
    if (hi > kCeiling) {
      out.lambda = lo;
      out.unreachable = true;
      return out;
    }
  }
  for (int step = 0; step < 40; ++step) {
    const double mid = 0.5 * (lo + hi);
    if (mean_factor(mid) > tau) lo = mid;
    else hi = mid;
  }
  out.lambda = hi;
  return out;
}

/// Mean of energy / (energy + lambda * weight) over units (empty weights = 1).
inline double mean_pruning_factor(std::span<const double> energy, double lambda,
                                  std::span<const double> weights = {}) {
  double total = 0.0;
  for (std::size_t i = 0; i < energy.size(); ++i)
    total += pruning_factor(energy[i], lambda, weights.empty() ? 1.0 : weights[i]);
  return total / static_cast<double>(energy.size());
}

inline LambdaSolution solve_lambda(std::span<const double> second_moments, double tau) {
  if (second_moments.empty()) throw DomainError("solve_lambda: no units");
  return solve_lambda(
      [&](double lambda) { return mean_pruning_factor(second_moments, lambda); }, tau);
}

inline LambdaSolution solve_lambda(const ActivationStats& stats, std::size_t site, double tau) {
  return solve_lambda(stats.at(site).second_moment.values(), tau);
}

// ---------------------------------------------------------------------------
// Refinement at a given strength
// ---------------------------------------------------------------------------

struct RefineOptions {
  TrainOptions retrain{1, 1e-3, 32, 1e-3};
  std::uint64_t seed = 0;
  AttributionMethod attribution = GradientXInput{};
};

struct Refined {
  RefinementPlan plan;
  Model model;
  std::vector<std::string> warnings;
};

namespace detail {

// Sites whose dense consumer is reachable for per-edge refinement.
inline std::vector<std::size_t> edge_sites(const Model& model) {
  std::vector<std::size_t> out;
  for (std::size_t site : model.refinable_sites) {
    try {
      consumer_layer(model, site);
      out.push_back(site);
    } catch (const PreconditionError&) {
    }
  }
  return out;
}

inline double clamp_unit(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace detail

/// Applies an explanation-guided method with the triangular schedule for
/// alpha. Sites are refined in order; statistics for each site are taken on
/// the model already refined at the earlier sites.
inline Refined refine_by_alpha(const Model& model, Method method, double alpha,
                               const Samples& data, const RefineOptions& opt = {}) {
  if (data.empty()) throw DomainError("refinement data is empty");
  Refined r{{method, alpha, {}, {}}, model, {}};
  std::vector<std::size_t> sites =
      method == Method::kEgemFull ? detail::edge_sites(model) : model.refinable_sites;
  if (sites.empty()) throw PreconditionError("model has no sites for " + method_name(method));
  const Schedule schedule = triangular_thresholds(alpha, sites.size());

  for (std::size_t k = 0; k < sites.size(); ++k) {
    // Sites shift when layers are inserted before them; track by ordinal.
    const std::size_t site = method == Method::kEgemFull
                                 ? sites[k]
                                 : r.model.refinable_sites[k];
    const double tau = schedule.thresholds[k];
    LambdaSolution sol;
    switch (method) {
      case Method::kEgem: {
        const ActivationStats stats = collect_stats(r.model, data.inputs, {site});
        sol = solve_lambda(stats, site, tau);
        if (sol.lambda > 0.0)
          r.model = apply_scaling(r.model, site, egem_coefficients(stats.at(site), sol.lambda));
        break;
      }
      case Method::kPcaEgem: {
        const Tensor rows = site_vectors(r.model, data.inputs, site);
        const PcaBasis basis = fit_pca(rows);
        const Tensor moments = pca_second_moments(basis, rows);
        sol = solve_lambda(moments.values(), tau);
        if (sol.lambda > 0.0) r.model = apply_pca_egem(r.model, site, basis, sol.lambda, rows);
        break;
      }
      case Method::kEgemFull: {
        const WeightedMoments wm = collect_weighted_moments(r.model, data, site, opt.attribution);
        const auto a = wm.activation_message.values();
        const std::size_t in = wm.activation_message.extent(0);
        const std::size_t out = wm.activation_message.extent(1);
        std::vector<double> weights(in * out);
        for (std::size_t i = 0; i < in; ++i)
          for (std::size_t j = 0; j < out; ++j) weights[i * out + j] = wm.message[j];
        sol = solve_lambda([&](double l) { return mean_pruning_factor(a, l, weights); }, tau);
        if (sol.lambda > 0.0) {
          Dense& d = std::get<Dense>(r.model.layers[consumer_layer(r.model, site)]);
          d.weight = egem_full_weights(d.weight, wm, sol.lambda);
        }
        break;
      }
      default:
        throw PreconditionError(method_name(method) + " is not scheduled by alpha");
    }
    if (sol.all_dead) r.warnings.push_back("site " + std::to_string(site) + ": all units dead");
    if (sol.unreachable)
      r.warnings.push_back("site " + std::to_string(site) + ": target factor unreachable");
    r.plan.sites.push_back(site);
    r.plan.site_lambdas.push_back(sol.lambda);
  }
  return r;
}

/// Refines with one grid value: alpha for explanation-guided methods, lambda
/// for last-layer refits, epochs for Retrain.
inline Refined refine_with(const Model& model, Method method, double value, const Samples& data,
                           const RefineOptions& opt = {}) {
  switch (method) {
    case Method::kOriginal:
      return {{method, value, {}, {}}, model, {}};
    case Method::kEgem:
    case Method::kEgemFull:
    case Method::kPcaEgem:
      return refine_by_alpha(model, method, value, data, opt);
    case Method::kRgem:
      return {{method, value, {}, {}}, rgem_refit(model, data.inputs, value), {}};
    case Method::kRidge:
      return {{method, value, {}, {}}, ridge_refit(model, data, value), {}};
    case Method::kRetrain: {
      if (!(value >= 1.0) || value != std::floor(value))
        throw DomainError("retrain epochs must be a positive integer");
      RetrainOptions ro{opt.retrain, opt.seed};
      ro.train.epochs = static_cast<std::size_t>(value);
      return {{method, value, {}, {}}, retrain(model, data, ro), {}};
    }
  }
  throw PreconditionError("unknown method");
}

/// Candidate grids ordered weakest-first, strongest-last.
inline std::vector<double> default_grid(Method method) {
  switch (method) {
    case Method::kOriginal:
      return {0.0};
    case Method::kEgem:
    case Method::kEgemFull:
    case Method::kPcaEgem:
      return {1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.01, 1e-3, 1e-4, 1e-5};
    case Method::kRgem:
    case Method::kRidge:
      return {1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4};
    case Method::kRetrain:
      return {1, 5, 10, 20, 30, 50, 100};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Slack-based selection
// ---------------------------------------------------------------------------

struct SelectionConfig {
  double slack_percent = 5.0;
  std::vector<double> candidate_grid;  // strongest-last; empty = default grid
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct Choice {
  std::size_t index = 0;
  bool no_candidate = false;
};

/// Strongest (last) candidate whose accuracy is at least original - slack
/// percentage points; the weakest with a flag when none qualifies.
inline Choice choose_by_slack(double original_accuracy, std::span<const double> candidate_accuracy,
                              double slack_percent) {
  if (candidate_accuracy.empty()) throw DomainError("empty candidate grid");
  if (!(slack_percent >= 0.0)) throw DomainError("slack must be non-negative");
  const double threshold = original_accuracy - slack_percent / 100.0 - 1e-12;
  for (std::size_t i = candidate_accuracy.size(); i-- > 0;) {
    if (candidate_accuracy[i] >= threshold) return {i, false};
  }
  return {0, true};
}

struct TraceRow {
  double candidate = 0.0;
  double val_accuracy = 0.0;
  bool chosen = false;
};

struct Selection {
  Refined refined;
  Choice choice;
  double original_val_accuracy = 0.0;
  std::vector<TraceRow> trace;
};

/// Seeded 80/20 split of the available data: {refinement, validation}.
inline std::pair<Samples, Samples> split_available(const Samples& data, double validation_fraction,
                                                   std::uint64_t seed) {
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
    throw DomainError("validation fraction must lie in (0, 1)");
  const std::size_t n_val =
      static_cast<std::size_t>(std::ceil(validation_fraction * static_cast<double>(data.size())));
  if (n_val == 0) throw DomainError("validation split is empty");
  if (n_val >= data.size()) throw DomainError("refinement split is empty");
  SeededRng rng(seed);
  const auto order = rng.permutation(data.size());
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> fit(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  return {data.subset(fit), data.subset(val)};
}

/// Every grid candidate refit on the refinement split and scored on the
/// validation split.
struct GridEvaluation {
  std::vector<double> grid;
  std::vector<Refined> candidates;
  std::vector<double> val_accuracy;
  double original_val_accuracy = 0.0;
};

inline GridEvaluation evaluate_grid(const Model& model, Method method, const Samples& available,
                                    const SelectionConfig& cfg, const RefineOptions& opt = {}) {
  GridEvaluation g;
  g.grid = cfg.candidate_grid.empty() ? default_grid(method) : cfg.candidate_grid;
  if (g.grid.empty()) throw DomainError("empty candidate grid");
  auto [fit, val] = split_available(available, cfg.validation_fraction, cfg.seed);
  g.original_val_accuracy = accuracy(model, val);
  for (double value : g.grid) {
    g.candidates.push_back(refine_with(model, method, value, fit, opt));
    g.val_accuracy.push_back(accuracy(g.candidates.back().model, val));
  }
  return g;
}

inline Selection choose(const GridEvaluation& g, double slack_percent) {
  Selection sel;
  sel.original_val_accuracy = g.original_val_accuracy;
  sel.choice = choose_by_slack(g.original_val_accuracy, g.val_accuracy, slack_percent);
  for (std::size_t i = 0; i < g.grid.size(); ++i)
    sel.trace.push_back({g.grid[i], g.val_accuracy[i], i == sel.choice.index});
  sel.refined = g.candidates[sel.choice.index];
  if (sel.choice.no_candidate)
    sel.refined.warnings.push_back("no candidate within slack; using weakest");
  return sel;
}

inline Selection select_by_slack(const Model& model, Method method, const Samples& available,
                                 const SelectionConfig& cfg, const RefineOptions& opt = {}) {
  return choose(evaluate_grid(model, method, available, cfg, opt), cfg.slack_percent);
}

inline void write_selection_trace(std::ostream& os, const std::vector<TraceRow>& trace) {
  char buf[96];
  os << "candidate,val_accuracy,chosen\n";
  for (const auto& row : trace) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%d\n", row.candidate, row.val_accuracy,
                  row.chosen ? 1 : 0);
    os << buf;
  }
}

}  // namespace clever_prune
