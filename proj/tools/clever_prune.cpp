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


// clever_prune: train a model on artifact-poisoned glyphs, refine it, and
// evaluate or sweep the refinement.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "clever_prune/pipeline.hpp"

namespace fs = std::filesystem;
namespace cp = clever_prune;

namespace {

constexpr const char* kUsage =
    "usage: clever_prune <command> [config.json] [--config PATH] [--out DIR] [--seed N] "
    "[--threads N] [--model PATH]\n"
    "commands: train, refine, evaluate, sweep-slack, sweep-samples, sweep-artifacts, explain\n";

struct Context {
  cp::ExperimentConfig cfg;
  fs::path out;
  fs::path model_path;  // empty: command default
};

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw cp::Error("cannot write " + path.string());
  return os;
}

void write_metrics(const fs::path& path, const std::vector<cp::MetricsRow>& rows) {
  auto os = open_out(path);
  cp::write_metrics_csv(os, rows);
  std::cout << "wrote " << path.string() << " (" << rows.size() << " rows)\n";
}

int cmd_train(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const cp::RunData data = cp::make_run_data(cfg.dataset, cfg.seed);
  const cp::Trained t = cp::train_original(cfg, data.train, cfg.seed);
  cp::save(t.model, ctx.out / "model.cpm");
  auto log = open_out(ctx.out / "train_log.csv");
  cp::write_train_log(log, t.log);
  cp::save_dataset(data.train, ctx.out / "train");
  cp::save_dataset(data.pool, ctx.out / "pool");
  cp::save_dataset(data.test, ctx.out / "test");
  cp::save_dataset(data.test_poisoned, ctx.out / "test_poisoned");
  const auto r = cp::evaluate_run(cfg, t.model, data, cfg.seed);
  std::cout << "trained " << cfg.train.epochs << " epochs; clean acc " << r.accuracy_clean
            << ", poisoned acc " << r.accuracy_poisoned << '\n';
  return 0;
}

int cmd_refine(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const cp::Model model = cp::load(ctx.model_path.empty() ? ctx.out / "model.cpm" : ctx.model_path);
  const cp::Dataset pool = cp::load_dataset(ctx.out / "pool");
  const cp::Selection sel =
      cp::refine_model(cfg, model, cfg.method, pool, cfg.n_refine, cfg.slack, cfg.seed);
  cp::save(sel.refined.model, ctx.out / "refined.cpm");
  auto trace = open_out(ctx.out / "selection.csv");
  cp::write_selection_trace(trace, sel.trace);
  cp::json info{{"method", cp::method_name(cfg.method)},
                {"value", sel.refined.plan.strength},
                {"slack", cfg.slack},
                {"n_refine", cfg.n_refine},
                {"run_seed", cfg.seed},
                {"no_candidate", sel.choice.no_candidate},
                {"site_lambdas", sel.refined.plan.site_lambdas},
                {"warnings", sel.refined.warnings}};
  open_out(ctx.out / "refined.json") << info.dump(1) << '\n';
  for (const auto& w : sel.refined.warnings) std::cerr << "warning: " << w << '\n';
  std::cout << cp::method_name(cfg.method) << ": chose " << sel.refined.plan.strength << '\n';
  return 0;
}

int cmd_evaluate(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  cp::RunData data;
  data.test = cp::load_dataset(ctx.out / "test");
  data.test_poisoned = cp::load_dataset(ctx.out / "test_poisoned");
  std::vector<cp::MetricsRow> rows;
  const fs::path original = ctx.model_path.empty() ? ctx.out / "model.cpm" : ctx.model_path;
  rows.push_back(cp::metrics_row(cp::evaluate_run(cfg, cp::load(original), data, cfg.seed),
                                 "original", 0.0, cfg.slack, cfg.n_refine));
  if (ctx.model_path.empty() && fs::exists(ctx.out / "refined.cpm")) {
    std::ifstream in(ctx.out / "refined.json");
    if (!in) throw cp::Error("refined.cpm has no refined.json next to it");
    const cp::json info = cp::json::parse(in);
    rows.push_back(cp::metrics_row(
        cp::evaluate_run(cfg, cp::load(ctx.out / "refined.cpm"), data, cfg.seed),
        info.at("method").get<std::string>(), info.at("value").get<double>(),
        info.at("slack").get<double>(), info.at("n_refine").get<std::size_t>()));
  }
  write_metrics(ctx.out / "metrics.csv", rows);
  return 0;
}

int cmd_explain(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  fs::path path = ctx.model_path;
  if (path.empty())
    path = fs::exists(ctx.out / "refined.cpm") ? ctx.out / "refined.cpm" : ctx.out / "model.cpm";
  const cp::Model model = cp::load(path);
  const cp::Dataset test = cp::load_dataset(ctx.out / "test_poisoned");
  const std::size_t n = std::min(cfg.explain.count, test.size());
  for (std::size_t i = 0; i < n; ++i) {
    const cp::RelevanceMap map = cp::explain_sample(model, test.images[i], cfg.explain);
    const fs::path file = ctx.out / ("explain_" + std::to_string(i) + ".csv");
    auto os = open_out(file);
    cp::write_relevance_csv(os, map);
  }
  std::cout << "explained " << n << " samples with " << path.string() << '\n';
  return 0;
}

bool known_command(const std::string& c) {
  for (const char* k : {"train", "refine", "evaluate", "sweep-slack", "sweep-samples",
                        "sweep-artifacts", "explain"})
    if (c == k) return true;
  return false;
}

int run(const std::string& command, const Context& ctx) {
  fs::create_directories(ctx.out);
  if (command == "train") return cmd_train(ctx);
  if (command == "refine") return cmd_refine(ctx);
  if (command == "evaluate") return cmd_evaluate(ctx);
  if (command == "explain") return cmd_explain(ctx);
  if (command == "sweep-slack") {
    write_metrics(ctx.out / "sweep_slack.csv", cp::sweep_slack(ctx.cfg));
    return 0;
  }
  if (command == "sweep-samples") {
    write_metrics(ctx.out / "sweep_samples.csv", cp::sweep_samples(ctx.cfg));
    return 0;
  }
  if (command == "sweep-artifacts") {
    for (const auto& [name, rows] : cp::sweep_artifacts(ctx.cfg))
      write_metrics(ctx.out / ("sweep_artifacts_" + name + ".csv"), rows);
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Clever Hans refinement experiments on procedural glyphs"};
  app.usage(kUsage);
  std::string command, positional_config, config_path, out_dir, model_path;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  app.add_option("command", command, "command to run")->required();
  app.add_option("config_file", positional_config, "experiment config (JSON)");
  auto* config_opt = app.add_option("--config", config_path, "experiment config (JSON)");
  auto* out_opt = app.add_option("--out", out_dir, "output directory");
  auto* seed_opt = app.add_option("--seed", seed, "run seed, overrides the config");
  auto* threads_opt = app.add_option("--threads", threads, "worker threads");
  app.add_option("--model", model_path, "input model for refine, evaluate or explain");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << '\n' << kUsage;
    return 1;
  }

  if (!known_command(command)) {
    std::cerr << "unknown command '" << command << "'\n" << kUsage;
    return 1;
  }

  try {
    Context ctx;
    if (config_opt->count() && !positional_config.empty() && positional_config != config_path)
      throw cp::ConfigError("two different config files given");
    const std::string cfg_file = config_opt->count() ? config_path : positional_config;
    if (!cfg_file.empty()) ctx.cfg = cp::load_config(cfg_file);
    if (seed_opt->count()) ctx.cfg.seed = seed;
    if (threads_opt->count()) {
      ctx.cfg.threads = threads;
    } else if (const char* env = std::getenv("CLEVER_PRUNE_THREADS")) {
      try {
        ctx.cfg.threads = std::stoul(env);
      } catch (const std::exception&) {
        throw cp::ConfigError(std::string("CLEVER_PRUNE_THREADS is not a number: ") + env);
      }
    }
    if (ctx.cfg.threads) cp::set_thread_count(ctx.cfg.threads);
    ctx.out = out_opt->count() ? out_dir : ctx.cfg.out;
    ctx.model_path = model_path;
    return run(command, ctx);
  } catch (const cp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const cp::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
