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

// A small Clever-Hans benchmark: procedural 16x16 digit glyphs, injected
// artifacts, poisoning, clean refinement sets and the evaluation metrics.

#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "clever_prune/model.hpp"

namespace clever_prune {

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

struct CornerPixels {
  static constexpr std::array<std::pair<std::size_t, std::size_t>, 3> kCoords{
      {{0, 0}, {0, 1}, {1, 0}}};
  double value = 1.0;
};
struct Blur {
  std::size_t kernel = 3;
};
struct LowerErase {
  double fraction = 0.5;
};
struct IntensityShift {
  double delta = 0.25;
};
struct Frame {
  std::size_t width = 1;
  double gray = 0.5;
};
struct Patch {
  std::size_t row = 0, col = 0, size = 3;
  double value = 1.0;
};

using ArtifactSpec = std::variant<CornerPixels, Blur, LowerErase, IntensityShift, Frame, Patch>;

inline std::string artifact_name(const ArtifactSpec& spec) {
  static constexpr const char* kNames[] = {"corner", "blur",  "lower-erase",
                                           "intensity-shift", "frame", "patch"};
  return kNames[spec.index()];
}

inline ArtifactSpec artifact_from_name(const std::string& name) {
  if (name == "corner") return CornerPixels{};
  if (name == "blur") return Blur{};
  if (name == "lower-erase") return LowerErase{};
  if (name == "intensity-shift") return IntensityShift{};
  if (name == "frame") return Frame{};
  if (name == "patch") return Patch{};
  throw ConfigError("unknown artifact '" + name + "'");
}

namespace detail {

inline void check_image(const Tensor& image) {
  if (image.rank() != 3) {
    throw DimensionError("images must be [C x H x W], got " + shape_string(image.shape()));
  }
}

}  // namespace detail

/// Applies the artifact to a [C x H x W] image; values stay in [0, 1].
inline Tensor inject_artifact(const Tensor& image, const ArtifactSpec& spec) {
  detail::check_image(image);
  const std::size_t channels = image.extent(0), h = image.extent(1), w = image.extent(2);
  Tensor out = image;
  auto at = [&](std::size_t c, std::size_t r, std::size_t col) -> double& {
    return out[(c * h + r) * w + col];
  };
  std::visit(
      [&](const auto& a) {
        using A = std::decay_t<decltype(a)>;
        if constexpr (std::is_same_v<A, CornerPixels>) {
          if (h < 2 || w < 2) throw DomainError("corner artifact needs at least 2x2 pixels");
          for (std::size_t c = 0; c < channels; ++c)
            for (auto [r, col] : CornerPixels::kCoords) at(c, r, col) = std::clamp(a.value, 0.0, 1.0);
        } else if constexpr (std::is_same_v<A, Blur>) {
          if (a.kernel == 0 || a.kernel % 2 == 0 || a.kernel > std::min(h, w))
            throw DomainError("blur kernel must be odd and fit the image");
          const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(a.kernel / 2);
          const double norm = 1.0 / static_cast<double>(a.kernel * a.kernel);
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t r = 0; r < h; ++r)
              for (std::size_t col = 0; col < w; ++col) {
                double s = 0.0;
                for (std::ptrdiff_t dr = -half; dr <= half; ++dr)
                  for (std::ptrdiff_t dc = -half; dc <= half; ++dc) {
                    const std::ptrdiff_t rr = static_cast<std::ptrdiff_t>(r) + dr;
                    const std::ptrdiff_t cc = static_cast<std::ptrdiff_t>(col) + dc;
                    if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(h) ||
                        cc >= static_cast<std::ptrdiff_t>(w))
                      continue;
                    s += image[(c * h + static_cast<std::size_t>(rr)) * w +
                               static_cast<std::size_t>(cc)];
                  }
                at(c, r, col) = std::clamp(s * norm, 0.0, 1.0);
              }
        } else if constexpr (std::is_same_v<A, LowerErase>) {
          if (!(a.fraction > 0.0 && a.fraction <= 1.0))
            throw DomainError("erase fraction must lie in (0, 1]");
          const std::size_t rows =
              static_cast<std::size_t>(std::ceil(a.fraction * static_cast<double>(h)));
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t r = h - rows; r < h; ++r)
              for (std::size_t col = 0; col < w; ++col) at(c, r, col) = 0.0;
        } else if constexpr (std::is_same_v<A, IntensityShift>) {
          if (!std::isfinite(a.delta)) throw DomainError("intensity shift must be finite");
          for (double& v : out.values()) v = std::clamp(v + a.delta, 0.0, 1.0);
        } else if constexpr (std::is_same_v<A, Frame>) {
          if (a.width == 0 || 2 * a.width > std::min(h, w))
            throw DomainError("frame width does not fit the image");
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t r = 0; r < h; ++r)
              for (std::size_t col = 0; col < w; ++col)
                if (r < a.width || col < a.width || r >= h - a.width || col >= w - a.width)
                  at(c, r, col) = std::clamp(a.gray, 0.0, 1.0);
        } else {
          if (a.size == 0 || a.row + a.size > h || a.col + a.size > w)
            throw DomainError("patch does not fit the image");
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t r = a.row; r < a.row + a.size; ++r)
              for (std::size_t col = a.col; col < a.col + a.size; ++col)
                at(c, r, col) = std::clamp(a.value, 0.0, 1.0);
        }
      },
      spec);
  return out;
}

/// Pixels the artifact may change (true) for an image of the given shape.
inline std::vector<bool> artifact_mask(const ArtifactSpec& spec, const Shape& shape) {
  const std::size_t channels = shape.at(0), h = shape.at(1), w = shape.at(2);
  std::vector<bool> mask(channels * h * w, false);
  auto set = [&](std::size_t r, std::size_t col) {
    for (std::size_t c = 0; c < channels; ++c) mask[(c * h + r) * w + col] = true;
  };
  if (std::holds_alternative<CornerPixels>(spec)) {
    for (auto [r, col] : CornerPixels::kCoords) set(r, col);
  } else if (const auto* p = std::get_if<Patch>(&spec)) {
    for (std::size_t r = p->row; r < p->row + p->size && r < h; ++r)
      for (std::size_t col = p->col; col < p->col + p->size && col < w; ++col) set(r, col);
  } else if (const auto* f = std::get_if<Frame>(&spec)) {
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t col = 0; col < w; ++col)
        if (r < f->width || col < f->width || r + f->width >= h || col + f->width >= w) set(r, col);
  } else if (const auto* e = std::get_if<LowerErase>(&spec)) {
    const std::size_t rows = static_cast<std::size_t>(std::ceil(e->fraction * static_cast<double>(h)));
    for (std::size_t r = h - std::min(rows, h); r < h; ++r)
      for (std::size_t col = 0; col < w; ++col) set(r, col);
  } else {
    mask.assign(mask.size(), true);
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

namespace group_bits {
inline constexpr std::uint32_t kThick = 1u;  // glyph drawn with a heavy stroke
}

struct Dataset {
  std::vector<Tensor> images;  // each [C x H x W] in [0, 1]
  std::vector<std::size_t> labels;
  std::vector<bool> artifact_flags;
  std::vector<std::uint32_t> group_tags;
  std::size_t class_count = 0;
  std::uint64_t seed = 0;
  std::optional<ArtifactSpec> artifact;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }

  Samples samples() const { return Samples{images, labels}; }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset d;
    d.class_count = class_count;
    d.seed = seed;
    d.artifact = artifact;
    for (std::size_t i : idx) {
      d.images.push_back(images.at(i));
      d.labels.push_back(labels[i]);
      d.artifact_flags.push_back(artifact_flags[i]);
      d.group_tags.push_back(group_tags[i]);
    }
    return d;
  }

  void validate() const {
    const std::size_t n = images.size();
    if (labels.size() != n || artifact_flags.size() != n || group_tags.size() != n)
      throw DimensionError("dataset columns have different lengths");
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] >= class_count)
        throw DomainError("label " + std::to_string(labels[i]) + " out of range");
      for (double v : images[i].values())
        if (!(v >= 0.0 && v <= 1.0)) throw DomainError("pixel value outside [0, 1]");
    }
  }
};

namespace detail {

struct Point {
  double x, y;
};
using Stroke = std::vector<Point>;

inline Stroke ellipse(double cx, double cy, double rx, double ry, int segments = 14) {
  Stroke s;
  for (int k = 0; k <= segments; ++k) {
    const double t = 2.0 * 3.14159265358979323846 * k / segments;
    s.push_back({cx + rx * std::sin(t), cy - ry * std::cos(t)});
  }
  return s;
}

// Stroke templates in the unit square (x right, y down).
inline const std::vector<std::vector<Stroke>>& digit_templates() {
  static const std::vector<std::vector<Stroke>> kTemplates = {
      {ellipse(0.5, 0.5, 0.32, 0.48)},
      {{{0.3, 0.2}, {0.55, 0.0}, {0.55, 1.0}}},
      {{{0.12, 0.25}, {0.3, 0.03}, {0.7, 0.03}, {0.86, 0.25}, {0.78, 0.48}, {0.12, 1.0},
        {0.9, 1.0}}},
      {{{0.15, 0.03}, {0.85, 0.03}, {0.45, 0.43}, {0.85, 0.62}, {0.8, 0.9}, {0.5, 1.0},
        {0.12, 0.9}}},
      {{{0.7, 1.0}, {0.7, 0.0}, {0.08, 0.68}, {0.92, 0.68}}},
      {{{0.85, 0.02}, {0.22, 0.02}, {0.16, 0.45}, {0.6, 0.38}, {0.86, 0.64}, {0.7, 0.96},
        {0.14, 0.94}}},
      {{{0.75, 0.02}, {0.32, 0.35}, {0.15, 0.7}, {0.3, 0.98}, {0.7, 0.98}, {0.86, 0.72},
        {0.62, 0.5}, {0.22, 0.6}}},
      {{{0.1, 0.02}, {0.9, 0.02}, {0.4, 1.0}}, {{0.35, 0.5}, {0.75, 0.5}}},
      {ellipse(0.5, 0.24, 0.23, 0.22), ellipse(0.5, 0.72, 0.29, 0.27)},
      {ellipse(0.48, 0.3, 0.27, 0.27), {{0.75, 0.3}, {0.62, 1.0}}},
  };
  return kTemplates;
}

inline double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

}  // namespace detail

struct GlyphOptions {
  std::size_t size = 16;
  double margin = 3.0;  // glyph box starts this many pixels from the border
  double noise = 0.15;
  double thick_probability = 0.5;
  double min_intensity = 0.45;
};

/// Renders one jittered glyph of `digit` (0-9) into a [1 x size x size] image.
inline Tensor render_glyph(std::size_t digit, SeededRng& rng, const GlyphOptions& opt,
                           bool* thick = nullptr) {
  const auto& templates = detail::digit_templates();
  if (digit >= templates.size()) throw DomainError("digit out of range");
  const double size = static_cast<double>(opt.size);
  const double box = size - 2.0 * opt.margin;
  const double scale_x = box * rng.uniform(0.7, 0.95);
  const double scale_y = box * rng.uniform(0.85, 1.05);
  const double angle = rng.uniform(-0.3, 0.3);
  const double shear = rng.uniform(-0.35, 0.35);
  const double cx = size / 2.0 + rng.uniform(-1.0, 1.0);
  const double cy = size / 2.0 + rng.uniform(-0.8, 0.8);
  const bool heavy = rng.uniform() < opt.thick_probability;
  const double width = heavy ? rng.uniform(1.5, 1.9) : rng.uniform(0.8, 1.1);
  const double intensity = rng.uniform(opt.min_intensity, 1.0);
  if (thick) *thick = heavy;

  std::vector<detail::Stroke> strokes;
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (const auto& stroke : templates[digit]) {
    detail::Stroke s;
    for (auto p : stroke) {
      const double u = (p.x - 0.5) * scale_x + shear * (p.y - 0.5) * scale_y;
      const double v = (p.y - 0.5) * scale_y;
      s.push_back({cx + ca * u - sa * v, cy + sa * u + ca * v});
    }
    strokes.push_back(std::move(s));
  }

  Tensor img({1, opt.size, opt.size});
  for (std::size_t r = 0; r < opt.size; ++r) {
    for (std::size_t c = 0; c < opt.size; ++c) {
      const detail::Point p{static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5};
      double dist = std::numeric_limits<double>::infinity();
      for (const auto& s : strokes)
        for (std::size_t k = 0; k + 1 < s.size(); ++k)
          dist = std::min(dist, detail::segment_distance(p, s[k], s[k + 1]));
      double v = intensity * std::clamp(1.0 - (dist - width / 2.0) / 0.8, 0.0, 1.0);
      v += opt.noise * rng.normal();
      img(0, r, c) = std::clamp(v, 0.0, 1.0);
    }
  }
  return img;
}

/// Class-balanced procedural digits: label k is glyph k for k < 10.
inline Dataset generate_dataset(std::uint64_t seed, std::size_t n_per_class,
                                std::size_t classes, const GlyphOptions& opt) {
  if (n_per_class < 1) throw DomainError("n_per_class must be at least 1");
  if (classes < 1 || classes > detail::digit_templates().size())
    throw DomainError("classes must lie in [1, 10]");
  if (opt.size < 8) throw DomainError("image size must be at least 8");
  const std::size_t n = n_per_class * classes;
  Dataset d;
  d.class_count = classes;
  d.seed = seed;
  d.images.resize(n);
  d.labels.resize(n);
  d.artifact_flags.assign(n, false);
  d.group_tags.assign(n, 0u);
  // One child stream per sample keeps generation order-independent.
  SeededRng root(seed);
  std::vector<std::uint64_t> seeds(n);
  for (auto& s : seeds) s = root.next_u64();
  std::vector<char> thick(n, 0);
  parallel_for(n, [&](std::size_t i) {
    SeededRng rng(seeds[i]);
    bool heavy = false;
    d.labels[i] = i % classes;
    d.images[i] = render_glyph(i % classes, rng, opt, &heavy);
    thick[i] = heavy;
  });
  for (std::size_t i = 0; i < n; ++i)
    if (thick[i]) d.group_tags[i] |= group_bits::kThick;
  return d;
}

inline Dataset generate_dataset(std::uint64_t seed, std::size_t n_per_class,
                                std::size_t classes = 10, std::size_t size = 16) {
  GlyphOptions opt;
  opt.size = size;
  opt.margin = 3.0 * static_cast<double>(size) / 16.0;
  return generate_dataset(seed, n_per_class, classes, opt);
}

/// Marks round(p * n) samples of the target class (or of every class when
/// target is empty) with the artifact. Which samples is drawn from rng.
inline Dataset poison(const Dataset& data, std::optional<std::size_t> target_class, double p,
                      const ArtifactSpec& spec, SeededRng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("poison rate must lie in [0, 1]");
  if (target_class && *target_class >= data.class_count)
    throw DomainError("target class out of range");
  Dataset out = data;
  if (p == 0.0) return out;
  out.artifact = spec;
  for (std::size_t cls = 0; cls < data.class_count; ++cls) {
    if (target_class && cls != *target_class) continue;
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (data.labels[i] == cls) members.push_back(i);
    const std::size_t count =
        static_cast<std::size_t>(std::floor(p * static_cast<double>(members.size()) + 0.5));
    rng.shuffle(members);
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t i = members[k];
      out.images[i] = inject_artifact(data.images[i], spec);
      out.artifact_flags[i] = true;
    }
  }
  return out;
}

/// Correctly predicted samples per class, n_per_class of each; classes with
/// fewer are topped up by drawing repeats from their correct samples.
inline Dataset select_refinement_set(const Model& model, const Dataset& data,
                                     std::size_t n_per_class, SeededRng& rng) {
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data.artifact_flags[i])
      throw PreconditionError("refinement pool contains flagged sample " + std::to_string(i));
  if (n_per_class == 0) throw DomainError("n_per_class must be positive");
  const auto pred = predict(model, data.images);
  std::vector<std::size_t> chosen;
  for (std::size_t cls = 0; cls < data.class_count; ++cls) {
    std::vector<std::size_t> correct;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (data.labels[i] == cls && pred[i] == cls) correct.push_back(i);
    if (correct.empty())
      throw DomainError("class " + std::to_string(cls) + " has no correctly predicted samples");
    rng.shuffle(correct);
    if (correct.size() >= n_per_class) {
      chosen.insert(chosen.end(), correct.begin(),
                    correct.begin() + static_cast<std::ptrdiff_t>(n_per_class));
    } else {
      chosen.insert(chosen.end(), correct.begin(), correct.end());
      for (std::size_t k = correct.size(); k < n_per_class; ++k)
        chosen.push_back(correct[rng.below(correct.size())]);
    }
  }
  return data.subset(chosen);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Group {
  std::string name;
  std::uint32_t mask = 0;
  std::uint32_t value = 0;
  bool contains(std::uint32_t tag) const { return (tag & mask) == value; }
};

inline std::vector<Group> default_groups() {
  return {{"all", 0, 0},
          {"thick", group_bits::kThick, group_bits::kThick},
          {"thin", group_bits::kThick, 0}};
}

struct LogitShiftSummary {
  double mean = 0.0;
  double q10 = 0.0, q50 = 0.0, q90 = 0.0;
  double max = 0.0;
};

struct MetricsReport {
  std::uint64_t run_seed = 0;
  double accuracy_clean = 0.0;
  double accuracy_poisoned = 0.0;
  double gap = 0.0;
  std::vector<std::pair<std::string, double>> recall_by_group;  // NaN if group empty
  std::vector<std::optional<double>> sparsity_by_layer;
  std::vector<double> separability_by_layer;
  std::optional<LogitShiftSummary> logit_shift_clean, logit_shift_poisoned;

  /// Accuracy at poisoning level p in [0, 1], interpolated between endpoints.
  double accuracy_at(double p) const {
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("poisoning level must lie in [0, 1]");
    return (1.0 - p) * accuracy_clean + p * accuracy_poisoned;
  }
};

/// Accuracy on clean and poisoned test sets and, on the poisoned set, recall
/// of `positive_class` within each group.
inline MetricsReport evaluate(const Model& model, const Dataset& clean, const Dataset& poisoned,
                              const std::vector<Group>& groups, std::size_t positive_class) {
  if (clean.empty() || poisoned.empty()) throw DomainError("evaluation set is empty");
  MetricsReport r;
  r.accuracy_clean = accuracy(model, clean.samples());
  const auto pred = predict(model, poisoned.images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < poisoned.size(); ++i) correct += pred[i] == poisoned.labels[i];
  r.accuracy_poisoned = static_cast<double>(correct) / static_cast<double>(poisoned.size());
  r.gap = r.accuracy_clean - r.accuracy_poisoned;
  for (const auto& g : groups) {
    std::size_t pos = 0, hit = 0;
    for (std::size_t i = 0; i < poisoned.size(); ++i) {
      if (poisoned.labels[i] != positive_class || !g.contains(poisoned.group_tags[i])) continue;
      ++pos;
      hit += pred[i] == positive_class;
    }
    r.recall_by_group.emplace_back(
        g.name, pos ? static_cast<double>(hit) / static_cast<double>(pos)
                    : std::numeric_limits<double>::quiet_NaN());
  }
  return r;
}

/// ||v||_2 / ||v||_1, or nothing for a zero vector.
inline std::optional<double> l2_l1_ratio(std::span<const double> v) {
  double l1 = 0.0, l2 = 0.0;
  for (double x : v) {
    l1 += std::abs(x);
    l2 += x * x;
  }
  if (l1 == 0.0) return std::nullopt;
  return std::sqrt(l2) / l1;
}

/// Mean l2/l1 ratio of the activation change an artifact causes at each
/// site. Images whose change is zero are skipped; a site where every image
/// is skipped reports nothing.
inline std::vector<std::optional<double>> sparsity(const Model& model,
                                                   const std::vector<Tensor>& images,
                                                   const ArtifactSpec& spec,
                                                   const std::vector<std::size_t>& sites) {
  if (images.empty()) throw DomainError("sparsity: no images");
  std::vector<std::vector<std::optional<double>>> per(images.size());
  parallel_for(images.size(), [&](std::size_t s) {
    auto [l0, clean] = forward_with_trace(model, images[s]);
    const Tensor modified = inject_artifact(images[s], spec);
    auto [l1, dirty] = forward_with_trace(model, modified);
    per[s].resize(sites.size());
    for (std::size_t k = 0; k < sites.size(); ++k) {
      const Tensor& a = site_activation(clean, images[s], sites[k]);
      const Tensor& b = site_activation(dirty, modified, sites[k]);
      std::vector<double> diff(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) diff[i] = b[i] - a[i];
      per[s][k] = l2_l1_ratio(diff);
    }
  });
  std::vector<std::optional<double>> out(sites.size());
  for (std::size_t k = 0; k < sites.size(); ++k) {
    double total = 0.0;
    std::size_t used = 0;
    for (const auto& row : per)
      if (row[k]) {
        total += *row[k];
        ++used;
      }
    if (used) out[k] = total / static_cast<double>(used);
  }
  return out;
}

/// 1 - x.y / (|x||y|); 1 when either vector has zero norm.
inline double cosine_distance(std::span<const double> x, std::span<const double> y) {
  double dot = 0.0, nx = 0.0, ny = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dot += x[i] * y[i];
    nx += x[i] * x[i];
    ny += y[i] * y[i];
  }
  if (nx == 0.0 || ny == 0.0) return 1.0;
  return 1.0 - dot / (std::sqrt(nx) * std::sqrt(ny));
}

/// R^2 = 1 - mean within-group distance / mean distance over all pairs, for
/// two equal-size groups of activation vectors. Zero when all distances are.
inline double separability_r2(const std::vector<Tensor>& group_a,
                              const std::vector<Tensor>& group_b) {
  const std::size_t n = group_a.size();
  if (n == 0 || group_b.size() != n) throw DomainError("separability needs equal, nonempty groups");
  const std::array<const std::vector<Tensor>*, 2> g{&group_a, &group_b};
  // Block sums, so identical groups give exactly equal means.
  double block[2][2] = {{0.0, 0.0}, {0.0, 0.0}};
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t m = 0; m < n; ++m)
        for (std::size_t q = 0; q < n; ++q)
          block[j][k] += cosine_distance((*g[j])[m].values(), (*g[k])[q].values());
  const double nn = static_cast<double>(n * n);
  const double within = (block[0][0] + block[1][1]) / (2.0 * nn);
  const double total = ((block[0][0] + block[1][1]) + (block[0][1] + block[1][0])) / (4.0 * nn);
  return total == 0.0 ? 0.0 : 1.0 - within / total;
}

/// Per-site separability of activations for paired clean/poisoned inputs.
inline std::vector<double> separability_r2(const Model& model, const std::vector<Tensor>& clean,
                                           const std::vector<Tensor>& poisoned,
                                           const std::vector<std::size_t>& sites) {
  if (clean.size() != poisoned.size()) throw DomainError("separability needs paired samples");
  std::vector<std::vector<Tensor>> a(sites.size()), b(sites.size());
  for (std::size_t s = 0; s < clean.size(); ++s) {
    auto [lc, tc] = forward_with_trace(model, clean[s]);
    auto [lp, tp] = forward_with_trace(model, poisoned[s]);
    for (std::size_t k = 0; k < sites.size(); ++k) {
      a[k].push_back(site_activation(tc, clean[s], sites[k]));
      b[k].push_back(site_activation(tp, poisoned[s], sites[k]));
    }
  }
  std::vector<double> out;
  for (std::size_t k = 0; k < sites.size(); ++k) out.push_back(separability_r2(a[k], b[k]));
  return out;
}

/// Per-sample max-abs logit change between two models.
inline std::vector<double> logit_shifts(const Model& before, const Model& after,
                                        const std::vector<Tensor>& inputs) {
  if (before.class_count != after.class_count)
    throw DimensionError("models have different output sizes");
  std::vector<double> out(inputs.size());
  parallel_for(inputs.size(), [&](std::size_t s) {
    out[s] = max_abs_diff(forward(before, inputs[s]), forward(after, inputs[s]));
  });
  return out;
}

/// Mean and linear-interpolated quantiles.
inline LogitShiftSummary summarize(std::vector<double> v) {
  if (v.empty()) throw DomainError("summarize: no values");
  std::sort(v.begin(), v.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  LogitShiftSummary s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  s.q10 = q(0.1);
  s.q50 = q(0.5);
  s.q90 = q(0.9);
  s.max = v.back();
  return s;
}

inline std::pair<LogitShiftSummary, LogitShiftSummary> logit_shift(
    const Model& before, const Model& after, const Dataset& clean, const Dataset& poisoned) {
  return {summarize(logit_shifts(before, after, clean.images)),
          summarize(logit_shifts(before, after, poisoned.images))};
}

}  // namespace clever_prune
