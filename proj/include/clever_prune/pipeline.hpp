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


// Experiment configuration, dataset files, metrics CSV and the end-to-end
// train / refine / evaluate / sweep drivers used by the command-line tool.
// Requires nlohmann/json on the include path.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "clever_prune/chbench.hpp"
#include "clever_prune/hypersearch.hpp"
#include "clever_prune/model_io.hpp"

namespace clever_prune {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct DatasetConfig {
  std::size_t classes = 10;
  std::size_t size = 16;
  std::size_t n_train_per_class = 300;
  std::size_t n_pool_per_class = 100;
  std::size_t n_test_per_class = 100;
  ArtifactSpec artifact = CornerPixels{};
  double p_train = 0.7;
  std::size_t target_class = 8;
  double noise = 0.15;
  double min_intensity = 0.45;
};

struct ModelConfig {
  std::vector<std::size_t> conv_channels = {8, 16};
  std::size_t kernel = 3;
  std::vector<std::size_t> dense_units = {64};
};

struct TrainConfig {
  std::size_t epochs = 8;
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
};

struct SweepConfig {
  std::size_t runs = 5;
  std::vector<double> slack = {0, 1, 2, 5, 10, 20};
  std::vector<std::size_t> samples = {25, 50, 200, 500, 700};
  std::vector<ArtifactSpec> artifacts = {CornerPixels{}, Blur{}, LowerErase{}, IntensityShift{}};
};

struct ExplainConfig {
  std::string method = "lrp";  // gi, ig or lrp
  double gamma = 0.0;
  double epsilon = 1e-9;
  std::size_t steps = 64;
  std::size_t count = 4;
};

struct ExperimentConfig {
  std::uint64_t seed = 7;
  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig train;
  Method method = Method::kPcaEgem;
  std::vector<double> grid;  // empty: the method's default grid
  double slack = 5.0;
  std::size_t n_refine = 50;
  SweepConfig sweep;
  ExplainConfig explain;
  std::string out = "out";
  std::size_t threads = 0;  // 0: leave the current setting alone

  void validate() const {
    const auto& d = dataset;
    if (d.classes < 1 || d.classes > 10) throw ConfigError("dataset.classes must lie in [1, 10]");
    if (d.size < 8) throw ConfigError("dataset.size must be at least 8");
    if (!d.n_train_per_class || !d.n_pool_per_class || !d.n_test_per_class)
      throw ConfigError("dataset sizes must be positive");
    if (!(d.p_train >= 0.0 && d.p_train <= 1.0)) throw ConfigError("dataset.p_train must lie in [0, 1]");
    if (d.target_class >= d.classes) throw ConfigError("dataset.target_class out of range");
    if (model.kernel == 0 || model.kernel % 2 == 0) throw ConfigError("model.kernel must be odd");
    if (!train.batch_size) throw ConfigError("train.batch_size must be positive");
    if (!(slack >= 0.0)) throw ConfigError("slack must be non-negative");
    if (!n_refine) throw ConfigError("n_refine must be positive");
    if (!sweep.runs) throw ConfigError("sweep.runs must be positive");
    if (explain.method != "gi" && explain.method != "ig" && explain.method != "lrp")
      throw ConfigError("explain.method must be gi, ig or lrp");
  }
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<std::string_view> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError("unknown key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <typename T>
void read_key(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for '" + where + key + "': " + e.what());
  }
}

}  // namespace detail

/// Artifact as a bare name ("blur") or an object {"type": "blur", "kernel": 5}.
inline ArtifactSpec artifact_from_json(const json& j) {
  if (j.is_string()) return artifact_from_name(j.get<std::string>());
  if (!j.is_object() || !j.contains("type")) throw ConfigError("artifact needs a type");
  ArtifactSpec spec = artifact_from_name(j.at("type").get<std::string>());
  const std::string w = "artifact.";
  std::visit(
      [&](auto& a) {
        using A = std::decay_t<decltype(a)>;
        if constexpr (std::is_same_v<A, CornerPixels>) {
          detail::check_keys(j, {"type", "value"}, "artifact");
          detail::read_key(j, "value", a.value, w);
        } else if constexpr (std::is_same_v<A, Blur>) {
          detail::check_keys(j, {"type", "kernel"}, "artifact");
          detail::read_key(j, "kernel", a.kernel, w);
        } else if constexpr (std::is_same_v<A, LowerErase>) {
          detail::check_keys(j, {"type", "fraction"}, "artifact");
          detail::read_key(j, "fraction", a.fraction, w);
        } else if constexpr (std::is_same_v<A, IntensityShift>) {
          detail::check_keys(j, {"type", "delta"}, "artifact");
          detail::read_key(j, "delta", a.delta, w);
        } else if constexpr (std::is_same_v<A, Frame>) {
          detail::check_keys(j, {"type", "width", "gray"}, "artifact");
          detail::read_key(j, "width", a.width, w);
          detail::read_key(j, "gray", a.gray, w);
        } else {
          detail::check_keys(j, {"type", "row", "col", "size", "value"}, "artifact");
          detail::read_key(j, "row", a.row, w);
          detail::read_key(j, "col", a.col, w);
          detail::read_key(j, "size", a.size, w);
          detail::read_key(j, "value", a.value, w);
        }
      },
      spec);
  return spec;
}

inline json artifact_to_json(const ArtifactSpec& spec) {
  json j{{"type", artifact_name(spec)}};
  std::visit(
      [&](const auto& a) {
        using A = std::decay_t<decltype(a)>;
        if constexpr (std::is_same_v<A, CornerPixels>) {
          j["value"] = a.value;
        } else if constexpr (std::is_same_v<A, Blur>) {
          j["kernel"] = a.kernel;
        } else if constexpr (std::is_same_v<A, LowerErase>) {
          j["fraction"] = a.fraction;
        } else if constexpr (std::is_same_v<A, IntensityShift>) {
          j["delta"] = a.delta;
        } else if constexpr (std::is_same_v<A, Frame>) {
          j["width"] = a.width;
          j["gray"] = a.gray;
        } else {
          j["row"] = a.row;
          j["col"] = a.col;
          j["size"] = a.size;
          j["value"] = a.value;
        }
      },
      spec);
  return j;
}

inline ExperimentConfig config_from_json(const json& j) {
  using detail::check_keys;
  using detail::read_key;
  ExperimentConfig c;
  check_keys(j, {"seed", "dataset", "model", "train", "method", "grid", "slack", "n_refine", "sweep",
                 "explain", "out", "threads"},
             "");
  read_key(j, "seed", c.seed, "");
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    check_keys(d, {"classes", "size", "n_train_per_class", "n_pool_per_class", "n_test_per_class",
                   "artifact", "p_train", "target_class", "noise", "min_intensity"},
               "dataset");
    auto& o = c.dataset;
    read_key(d, "classes", o.classes, "dataset.");
    read_key(d, "size", o.size, "dataset.");
    read_key(d, "n_train_per_class", o.n_train_per_class, "dataset.");
    read_key(d, "n_pool_per_class", o.n_pool_per_class, "dataset.");
    read_key(d, "n_test_per_class", o.n_test_per_class, "dataset.");
    if (d.contains("artifact")) o.artifact = artifact_from_json(d.at("artifact"));
    read_key(d, "p_train", o.p_train, "dataset.");
    read_key(d, "target_class", o.target_class, "dataset.");
    read_key(d, "noise", o.noise, "dataset.");
    read_key(d, "min_intensity", o.min_intensity, "dataset.");
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, {"conv_channels", "kernel", "dense_units"}, "model");
    read_key(m, "conv_channels", c.model.conv_channels, "model.");
    read_key(m, "kernel", c.model.kernel, "model.");
    read_key(m, "dense_units", c.model.dense_units, "model.");
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, {"epochs", "learning_rate", "batch_size"}, "train");
    read_key(t, "epochs", c.train.epochs, "train.");
    read_key(t, "learning_rate", c.train.learning_rate, "train.");
    read_key(t, "batch_size", c.train.batch_size, "train.");
  }
  if (j.contains("method")) {
    if (!j.at("method").is_string()) throw ConfigError("method must be a string");
    c.method = parse_method(j.at("method").get<std::string>());
  }
  read_key(j, "grid", c.grid, "");
  read_key(j, "slack", c.slack, "");
  read_key(j, "n_refine", c.n_refine, "");
  if (j.contains("sweep")) {
    const json& s = j.at("sweep");
    check_keys(s, {"runs", "slack", "samples", "artifacts"}, "sweep");
    read_key(s, "runs", c.sweep.runs, "sweep.");
    read_key(s, "slack", c.sweep.slack, "sweep.");
    read_key(s, "samples", c.sweep.samples, "sweep.");
    if (s.contains("artifacts")) {
      if (!s.at("artifacts").is_array()) throw ConfigError("sweep.artifacts must be an array");
      c.sweep.artifacts.clear();
      for (const json& a : s.at("artifacts")) c.sweep.artifacts.push_back(artifact_from_json(a));
    }
  }
  if (j.contains("explain")) {
    const json& e = j.at("explain");
    check_keys(e, {"method", "gamma", "epsilon", "steps", "count"}, "explain");
    read_key(e, "method", c.explain.method, "explain.");
    read_key(e, "gamma", c.explain.gamma, "explain.");
    read_key(e, "epsilon", c.explain.epsilon, "explain.");
    read_key(e, "steps", c.explain.steps, "explain.");
    read_key(e, "count", c.explain.count, "explain.");
  }
  read_key(j, "out", c.out, "");
  read_key(j, "threads", c.threads, "");
  c.validate();
  return c;
}

inline json config_to_json(const ExperimentConfig& c) {
  json artifacts = json::array();
  for (const auto& a : c.sweep.artifacts) artifacts.push_back(artifact_to_json(a));
  const auto& d = c.dataset;
  return json{
      {"seed", c.seed},
      {"dataset",
       {{"classes", d.classes},
        {"size", d.size},
        {"n_train_per_class", d.n_train_per_class},
        {"n_pool_per_class", d.n_pool_per_class},
        {"n_test_per_class", d.n_test_per_class},
        {"artifact", artifact_to_json(d.artifact)},
        {"p_train", d.p_train},
        {"target_class", d.target_class},
        {"noise", d.noise},
        {"min_intensity", d.min_intensity}}},
      {"model",
       {{"conv_channels", c.model.conv_channels},
        {"kernel", c.model.kernel},
        {"dense_units", c.model.dense_units}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"learning_rate", c.train.learning_rate},
        {"batch_size", c.train.batch_size}}},
      {"method", method_name(c.method)},
      {"grid", c.grid},
      {"slack", c.slack},
      {"n_refine", c.n_refine},
      {"sweep",
       {{"runs", c.sweep.runs},
        {"slack", c.sweep.slack},
        {"samples", c.sweep.samples},
        {"artifacts", artifacts}}},
      {"explain",
       {{"method", c.explain.method},
        {"gamma", c.explain.gamma},
        {"epsilon", c.explain.epsilon},
        {"steps", c.explain.steps},
        {"count", c.explain.count}}},
      {"out", c.out},
      {"threads", c.threads}};
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Dataset files: images in the tensor container, everything else in JSON
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& d, const std::filesystem::path& stem) {
  d.validate();
  std::vector<Tensor> images;
  if (!d.empty()) {
    Shape shape{d.size()};
    for (std::size_t e : d.images.front().shape()) shape.push_back(e);
    Tensor all(shape);
    const std::size_t per = d.images.front().size();
    for (std::size_t i = 0; i < d.size(); ++i)
      std::copy(d.images[i].values().begin(), d.images[i].values().end(),
                all.values().begin() + static_cast<std::ptrdiff_t>(i * per));
    images.push_back(std::move(all));
  }
  save_tensors(images, stem.string() + ".cpd");
  std::vector<int> flags(d.artifact_flags.begin(), d.artifact_flags.end());
  json side{{"class_count", d.class_count},
            {"seed", d.seed},
            {"labels", d.labels},
            {"artifact_flags", flags},
            {"group_tags", d.group_tags},
            {"artifact", d.artifact ? artifact_to_json(*d.artifact) : json(nullptr)}};
  std::ofstream out(stem.string() + ".json", std::ios::trunc);
  if (!out) throw Error("cannot write " + stem.string() + ".json");
  out << side.dump(1) << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& stem) {
  const auto tensors = load_tensors(stem.string() + ".cpd");
  std::ifstream in(stem.string() + ".json");
  if (!in) throw Error("cannot open " + stem.string() + ".json");
  Dataset d;
  try {
    const json side = json::parse(in);
    d.class_count = side.at("class_count").get<std::size_t>();
    d.seed = side.at("seed").get<std::uint64_t>();
    d.labels = side.at("labels").get<std::vector<std::size_t>>();
    for (int f : side.at("artifact_flags").get<std::vector<int>>()) d.artifact_flags.push_back(f != 0);
    d.group_tags = side.at("group_tags").get<std::vector<std::uint32_t>>();
    if (!side.at("artifact").is_null()) d.artifact = artifact_from_json(side.at("artifact"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("dataset sidecar: ") + e.what(), 0);
  }
  if (tensors.size() > 1) throw FormatError("dataset container holds more than one tensor", 0);
  if (!tensors.empty()) {
    const Tensor& all = tensors.front();
    if (all.rank() < 2) throw FormatError("dataset images need a leading sample axis", 0);
    const Shape item(all.shape().begin() + 1, all.shape().end());
    const std::size_t per = shape_volume(item);
    for (std::size_t i = 0; i < all.extent(0); ++i) {
      Tensor img(item);
      std::copy(all.values().begin() + static_cast<std::ptrdiff_t>(i * per),
                all.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * per),
                img.values().begin());
      d.images.push_back(std::move(img));
    }
  }
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

struct MetricsRow {
  std::uint64_t run_seed = 0;
  std::string method;
  double alpha_or_lambda = 0.0;
  double slack = 0.0;
  std::size_t n_refine = 0;
  double acc_clean = 0.0;
  double acc_poisoned = 0.0;
  double gap = 0.0;
  std::vector<std::pair<std::string, double>> recall;  // group name, recall

  bool operator==(const MetricsRow&) const = default;
};

inline constexpr const char* kMetricsColumns[] = {"run_seed", "method",   "alpha_or_lambda",
                                                  "slack",    "n_refine", "acc_clean",
                                                  "acc_poisoned", "gap"};

inline MetricsRow metrics_row(const MetricsReport& r, std::string method, double value,
                              double slack, std::size_t n_refine) {
  return {r.run_seed, std::move(method), value, slack, n_refine, r.accuracy_clean,
          r.accuracy_poisoned, r.gap, r.recall_by_group};
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
  for (const char* c : kMetricsColumns) os << (c == kMetricsColumns[0] ? "" : ",") << c;
  if (!rows.empty())
    for (const auto& [name, v] : rows.front().recall) os << ",recall_" << name;
  os << '\n';
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    os << r.run_seed << ',' << r.method << ',' << num(r.alpha_or_lambda) << ',' << num(r.slack)
       << ',' << r.n_refine << ',' << num(r.acc_clean) << ',' << num(r.acc_poisoned) << ','
       << num(r.gap);
    for (const auto& [name, v] : r.recall) os << ',' << num(v);
    os << '\n';
  }
}

inline std::vector<MetricsRow> read_metrics_csv(std::istream& is) {
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
  };
  auto number = [](const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw FormatError("metrics: bad number '" + s + "'", 0);
    return v;
  };
  std::string line;
  if (!std::getline(is, line)) throw FormatError("metrics: missing header", 0);
  const auto header = split(line);
  const std::size_t fixed = std::size(kMetricsColumns);
  if (header.size() < fixed) throw FormatError("metrics: short header", 0);
  std::vector<std::string> groups;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i < fixed) {
      if (header[i] != kMetricsColumns[i])
        throw FormatError("metrics: expected column '" + std::string(kMetricsColumns[i]) + "'", 0);
    } else {
      if (header[i].rfind("recall_", 0) != 0)
        throw FormatError("metrics: unexpected column '" + header[i] + "'", 0);
      groups.push_back(header[i].substr(7));
    }
  }
  std::vector<MetricsRow> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size())
      throw FormatError("metrics: line " + std::to_string(line_no) + " has " +
                            std::to_string(cells.size()) + " cells",
                        0);
    MetricsRow r;
    r.run_seed = std::stoull(cells[0]);
    r.method = cells[1];
    r.alpha_or_lambda = number(cells[2]);
    r.slack = number(cells[3]);
    r.n_refine = static_cast<std::size_t>(std::stoull(cells[4]));
    r.acc_clean = number(cells[5]);
    r.acc_poisoned = number(cells[6]);
    r.gap = number(cells[7]);
    for (std::size_t g = 0; g < groups.size(); ++g) r.recall.emplace_back(groups[g], number(cells[fixed + g]));
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Independent streams for one run, all derived from the run seed.
struct RunSeeds {
  std::uint64_t train_data, pool_data, test_data, poison_train, poison_test, init, shuffle,
      pick, split, retrain;
};

inline RunSeeds derive_seeds(std::uint64_t seed) {
  SeededRng r(seed);
  RunSeeds s{};
  for (std::uint64_t* p : {&s.train_data, &s.pool_data, &s.test_data, &s.poison_train,
                           &s.poison_test, &s.init, &s.shuffle, &s.pick, &s.split, &s.retrain})
    *p = r.next_u64();
  return s;
}

/// Poisoned training set, clean pool of available data, and the test set at
/// 0% and 100% uniform poisoning.
struct RunData {
  Dataset train, pool, test, test_poisoned;
};

inline RunData make_run_data(const DatasetConfig& cfg, std::uint64_t seed) {
  const RunSeeds s = derive_seeds(seed);
  GlyphOptions opt;
  opt.size = cfg.size;
  opt.margin = 3.0 * static_cast<double>(cfg.size) / 16.0;
  opt.noise = cfg.noise;
  opt.min_intensity = cfg.min_intensity;
  RunData d;
  SeededRng poison_train(s.poison_train), poison_test(s.poison_test);
  d.train = poison(generate_dataset(s.train_data, cfg.n_train_per_class, cfg.classes, opt),
                   cfg.target_class, cfg.p_train, cfg.artifact, poison_train);
  d.pool = generate_dataset(s.pool_data, cfg.n_pool_per_class, cfg.classes, opt);
  d.test = generate_dataset(s.test_data, cfg.n_test_per_class, cfg.classes, opt);
  d.test_poisoned = poison(d.test, std::nullopt, 1.0, cfg.artifact, poison_test);
  return d;
}

struct Trained {
  Model model;
  TrainLog log;
};

inline Trained train_original(const ExperimentConfig& cfg, const Dataset& train_set,
                              std::uint64_t seed) {
  const RunSeeds s = derive_seeds(seed);
  CnnSpec spec;
  spec.input = {1, cfg.dataset.size, cfg.dataset.size};
  spec.conv_channels = cfg.model.conv_channels;
  spec.kernel = cfg.model.kernel;
  spec.dense_units = cfg.model.dense_units;
  spec.classes = cfg.dataset.classes;
  SeededRng init(s.init), shuffle(s.shuffle);
  Trained t{make_cnn(spec, init), {}};
  TrainOptions opt;
  opt.epochs = cfg.train.epochs;
  opt.learning_rate = cfg.train.learning_rate;
  opt.batch_size = cfg.train.batch_size;
  t.log = train(t.model, train_set.samples(), opt, shuffle);
  return t;
}

inline Dataset refinement_set(const Model& model, const Dataset& pool, std::size_t n_per_class,
                              std::uint64_t seed) {
  SeededRng rng(derive_seeds(seed).pick);
  return select_refinement_set(model, pool, n_per_class, rng);
}

inline GridEvaluation refinement_grid(const ExperimentConfig& cfg, const Model& model,
                                      Method method, const Dataset& refine_set,
                                      std::uint64_t seed) {
  const RunSeeds s = derive_seeds(seed);
  SelectionConfig sc;
  sc.slack_percent = cfg.slack;
  sc.candidate_grid = cfg.grid;
  sc.seed = s.split;
  RefineOptions ro;
  ro.seed = s.retrain;
  return evaluate_grid(model, method, refine_set.samples(), sc, ro);
}

/// Refinement with slack-based selection; Original returns the model as is.
inline Selection refine_model(const ExperimentConfig& cfg, const Model& model, Method method,
                              const Dataset& pool, std::size_t n_refine, double slack,
                              std::uint64_t seed) {
  if (method == Method::kOriginal) {
    Selection sel;
    sel.refined = {{method, 0.0, {}, {}}, model, {}};
    sel.trace.push_back({0.0, 0.0, true});
    return sel;
  }
  const Dataset set = refinement_set(model, pool, n_refine, seed);
  return choose(refinement_grid(cfg, model, method, set, seed), slack);
}

inline MetricsReport evaluate_run(const ExperimentConfig& cfg, const Model& model,
                                  const RunData& data, std::uint64_t seed) {
  MetricsReport r =
      evaluate(model, data.test, data.test_poisoned, default_groups(), cfg.dataset.target_class);
  r.run_seed = seed;
  return r;
}

inline void write_train_log(std::ostream& os, const TrainLog& log) {
  char buf[96];
  os << "epoch,loss,accuracy\n";
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", e + 1, log.epoch_loss[e],
                  log.epoch_accuracy[e]);
    os << buf;
  }
}

/// Sweep over slack values. Each run trains once and evaluates the grid
/// once; rows are ordered by (setting, run).
inline std::vector<MetricsRow> sweep_slack(const ExperimentConfig& cfg) {
  std::vector<std::vector<MetricsRow>> by_setting(cfg.sweep.slack.size());
  for (std::size_t run = 0; run < cfg.sweep.runs; ++run) {
    const std::uint64_t seed = cfg.seed + run;
    const RunData data = make_run_data(cfg.dataset, seed);
    const Trained t = train_original(cfg, data.train, seed);
    std::optional<GridEvaluation> grid;
    if (cfg.method != Method::kOriginal)
      grid = refinement_grid(cfg, t.model, cfg.method,
                             refinement_set(t.model, data.pool, cfg.n_refine, seed), seed);
    for (std::size_t k = 0; k < cfg.sweep.slack.size(); ++k) {
      const double s = cfg.sweep.slack[k];
      const Model* m = &t.model;
      double value = 0.0;
      if (grid) {
        const std::size_t i =
            choose_by_slack(grid->original_val_accuracy, grid->val_accuracy, s).index;
        m = &grid->candidates[i].model;
        value = grid->grid[i];
      }
      by_setting[k].push_back(metrics_row(evaluate_run(cfg, *m, data, seed),
                                          method_name(cfg.method), value, s, cfg.n_refine));
    }
  }
  std::vector<MetricsRow> rows;
  for (auto& v : by_setting) rows.insert(rows.end(), v.begin(), v.end());
  return rows;
}

inline std::vector<MetricsRow> sweep_samples(const ExperimentConfig& cfg) {
  std::vector<std::vector<MetricsRow>> by_setting(cfg.sweep.samples.size());
  for (std::size_t run = 0; run < cfg.sweep.runs; ++run) {
    const std::uint64_t seed = cfg.seed + run;
    const RunData data = make_run_data(cfg.dataset, seed);
    const Trained t = train_original(cfg, data.train, seed);
    for (std::size_t k = 0; k < cfg.sweep.samples.size(); ++k) {
      const std::size_t n = cfg.sweep.samples[k];
      const Selection sel = refine_model(cfg, t.model, cfg.method, data.pool, n, cfg.slack, seed);
      by_setting[k].push_back(metrics_row(evaluate_run(cfg, sel.refined.model, data, seed),
                                          method_name(cfg.method), sel.refined.plan.strength,
                                          cfg.slack, n));
    }
  }
  std::vector<MetricsRow> rows;
  for (auto& v : by_setting) rows.insert(rows.end(), v.begin(), v.end());
  return rows;
}

/// One table per artifact type: a model is trained on data poisoned with
/// that artifact for every run.
inline std::vector<std::pair<std::string, std::vector<MetricsRow>>> sweep_artifacts(
    const ExperimentConfig& cfg) {
  std::vector<std::pair<std::string, std::vector<MetricsRow>>> out;
  for (const ArtifactSpec& spec : cfg.sweep.artifacts) {
    ExperimentConfig c = cfg;
    c.dataset.artifact = spec;
    std::vector<MetricsRow> rows;
    for (std::size_t run = 0; run < cfg.sweep.runs; ++run) {
      const std::uint64_t seed = cfg.seed + run;
      const RunData data = make_run_data(c.dataset, seed);
      const Trained t = train_original(c, data.train, seed);
      const Selection sel =
          refine_model(c, t.model, c.method, data.pool, c.n_refine, c.slack, seed);
      rows.push_back(metrics_row(evaluate_run(c, sel.refined.model, data, seed),
                                 method_name(c.method), sel.refined.plan.strength, c.slack,
                                 c.n_refine));
    }
    out.emplace_back(artifact_name(spec), std::move(rows));
  }
  return out;
}

inline AttributionMethod explain_method(const ExplainConfig& e) {
  if (e.method == "gi") return GradientXInput{};
  if (e.method == "ig") return IntegratedGradients{e.steps};
  return Lrp{e.gamma, e.epsilon};
}

/// Relevance of every layer for the predicted class of one input. LRP gives
/// all layers in one pass; the gradient methods are evaluated per layer.
inline RelevanceMap explain_sample(const Model& model, const Tensor& x, const ExplainConfig& e) {
  const Tensor logits = forward(model, x);
  const std::size_t target = argmax(logits.values());
  const AttributionMethod method = explain_method(e);
  if (const auto* l = std::get_if<Lrp>(&method)) return lrp(model, x, target, *l);
  RelevanceMap map;
  map.target = target;
  map.input = attribute(model, x, target, kInputSite, method);
  for (std::size_t l = 0; l < model.layers.size(); ++l)
    map.layers.push_back(attribute(model, x, target, l, method));
  return map;
}

}  // namespace clever_prune
