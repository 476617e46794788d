// Copyright 2026 The dplot-lab Authors
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

// Command-line front end: dataset generation, pretraining, block selection
// and the adaptation runs.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "dplot/checkpoint.hpp"
#include "dplot/error.hpp"
#include "dplot/harness.hpp"

namespace {

using namespace dplot;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;

struct Overrides {
  std::optional<double> gamma;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> method;
  std::optional<double> alpha;
  std::optional<double> lr_entropy;
  std::optional<double> lr_consistency;
  std::optional<std::size_t> buffer;
  std::optional<double> freq;
};

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

RunConfig load_config(const std::string& path, const Overrides& o) {
  ConfigFile file = ConfigFile::load(path);
  if (o.gamma) file.set("selection.gamma", num(*o.gamma));
  if (o.seed) file.set("run.seeds", std::to_string(*o.seed));
  if (o.method) file.set("adapt.method", *o.method);
  if (o.alpha) file.set("adapt.alpha", num(*o.alpha));
  if (o.lr_entropy) file.set("adapt.lr_entropy", num(*o.lr_entropy));
  if (o.lr_consistency) file.set("adapt.lr_consistency", num(*o.lr_consistency));
  if (o.buffer) file.set("single_sample.buffer", std::to_string(*o.buffer));
  if (o.freq) file.set("single_sample.freq", num(*o.freq));
  return RunConfig::from_file(file);
}

void write_outputs(const Report& report, const RunConfig& cfg) {
  write_metrics(report.all_records(), cfg.metrics_path);
  if (!cfg.report_path.empty()) {
    std::ofstream out(cfg.report_path, std::ios::trunc);
    out << report.to_json().dump(2) << "\n";
    if (!out) throw FormatError("cannot write report '" + cfg.report_path + "'");
  }
  const nlohmann::json summary = report.to_json();
  for (const auto& [method, err] : summary["median_error"].items()) {
    std::printf("%-16s median error %.4f\n", method.c_str(), err.get<double>());
  }
  for (const auto& r : report.runs) {
    if (r.summary.collapsed) {
      std::printf("warning: %s seed %llu collapsed\n", r.summary.method.c_str(),
                  static_cast<unsigned long long>(r.summary.seed));
    }
  }
}

template <class T>
int run_command(const std::string& command, const RunConfig& cfg) {
  const Datasets data = make_datasets(cfg.data, cfg.data_dir);
  if (command == "gen-data") {
    if (cfg.data_dir.empty()) throw ConfigError("key 'paths.data_dir' is required for gen-data");
    save_datasets(data, cfg.data, cfg.data_dir);
    std::printf("wrote %zu/%zu/%zu/%zu images to %s\n", data.train.size(), data.val.size(),
                data.test_pool.size(), data.source.size(), cfg.data_dir.c_str());
    return kExitOk;
  }
  if (command == "pretrain") {
    PretrainResult r;
    const BlockNet<T> model = build_and_pretrain<T>(cfg, data, &r);
    save_checkpoint(model, cfg.checkpoint_path,
                    {{"val_error", r.val_error},
                     {"final_loss", r.final_loss},
                     {"epochs", cfg.pretrain.epochs}});
    std::printf("clean validation error %.4f (final loss %.4f)\n", r.val_error, r.final_loss);
    return kExitOk;
  }
  if (!std::filesystem::exists(cfg.checkpoint_path)) {
    throw FormatError("checkpoint '" + cfg.checkpoint_path + "' not found; run pretrain first");
  }
  BlockNet<T> model = load_checkpoint<T>(cfg.checkpoint_path);
  if (model.num_classes() != cfg.data.classes) {
    throw ConfigError("key 'data.classes' does not match the checkpoint");
  }
  if (command == "select-blocks") {
    if (cfg.selection_path.empty()) {
      throw ConfigError("key 'paths.selection' is required for select-blocks");
    }
    const SelectionReport r = select_blocks(model, data.source, cfg.gamma, cfg.perturbation,
                                            cfg.selection, cfg.seeds.front());
    save_selection(r, cfg.selection_path);
    for (std::size_t i = 0; i < r.raw.size(); ++i) {
      std::printf("block %zu  raw %.6f  scaled %.4f\n", i + 1, r.raw[i], r.scaled[i]);
    }
    std::printf("selected:");
    for (std::size_t b : r.selected) std::printf(" %zu", b);
    std::printf("\n");
    if (!r.warning.empty()) std::printf("warning: %s\n", r.warning.c_str());
    return kExitOk;
  }
  Report report;
  if (command == "adapt") {
    RunConfig c = cfg;
    c.methods = {cfg.method};
    report = cfg.single_sample.enabled ? run_single_sample(model, c, data)
                                       : run_benchmark(model, c, data);
  } else if (command == "bench") {
    report = run_benchmark(model, cfg, data);
  } else if (command == "ablate") {
    report = run_ablation(model, cfg, data);
  } else if (command == "single-sample") {
    report = run_single_sample(model, cfg, data);
  } else {
    throw ConfigError("unknown command '" + command + "'");
  }
  write_outputs(report, cfg);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Test-time adaptation lab: block selection and paired-view pseudo-labeling"};
  app.require_subcommand(1);
  std::string config_path;
  Overrides o;
  const char* commands[][2] = {
      {"gen-data", "Generate and cache the datasets"},
      {"pretrain", "Train the source model and write a checkpoint"},
      {"select-blocks", "Run block selection and write the report"},
      {"adapt", "Adapt one method over the configured stream"},
      {"bench", "Run every configured method over the stream"},
      {"ablate", "Run ablation variants on shared streams"},
      {"single-sample", "Single-sample mode with an update buffer"},
  };
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c[0], c[1]);
    sub->add_option("--config", config_path, "Config file")->required();
    sub->add_option("--gamma", o.gamma, "Selection threshold");
    sub->add_option("--seed", o.seed, "Run a single seed");
    sub->add_option("--method", o.method, "source | bn1 | tent | tent+selection | dplot");
    sub->add_option("--alpha", o.alpha, "Teacher EMA decay");
    sub->add_option("--lr-entropy", o.lr_entropy, "Entropy-step learning rate");
    sub->add_option("--lr-consistency", o.lr_consistency, "Consistency-step learning rate");
    sub->add_option("--buffer", o.buffer, "Single-sample buffer size");
    sub->add_option("--freq", o.freq, "Single-sample update frequency");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const RunConfig cfg = load_config(config_path, o);
    return cfg.precision == "f64" ? run_command<double>(command, cfg)
                                  : run_command<float>(command, cfg);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "divergence: %s\n", e.what());
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
