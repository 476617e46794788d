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

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dplot/adapt.hpp"
#include "dplot/data.hpp"
#include "dplot/model.hpp"
#include "dplot/selection.hpp"

namespace dplot {

// Key/value configuration text: `key = value` lines, `#` comments and
// `[section]` headers that prefix the following keys ("section.key").
class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text, const std::string& origin = "<string>");
  static ConfigFile load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

 private:
  std::map<std::string, std::string> values_;
};

struct DataConfig {
  std::size_t classes = 4;
  std::size_t train_size = 4000;
  std::size_t val_size = 1000;
  std::size_t test_pool_size = 1280;
  std::size_t source_size = 512;  // clean source images used by block selection
  std::uint64_t seed = 1;
};

struct PretrainConfig {
  std::size_t epochs = 5;
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::uint64_t model_seed = 7;
};

struct SingleSampleConfig {
  bool enabled = false;
  std::size_t buffer = 64;     // b, the number of most recent samples kept
  double freq = 1.0;           // k; updates happen every round(b / k) samples
  std::size_t base_batch = 0;  // 0 means the stream batch size
};

struct RunConfig {
  std::string run_id = "run";
  Method method = Method::dplot;
  std::vector<Method> methods;  // bench: methods to run, default all five
  AdaptConfig adapt;
  std::size_t warmup_batches = 0;
  StreamSpec stream;
  double gamma = 0.75;
  Perturbation perturbation;
  SelectionConfig selection;
  std::vector<std::uint64_t> seeds{0};
  DataConfig data;
  PretrainConfig pretrain;
  SingleSampleConfig single_sample;
  std::vector<std::string> variants;  // ablate
  std::string precision = "f32";
  bool timing = false;  // write measured wall_ms instead of 0

  std::string checkpoint_path = "checkpoint";
  std::string selection_path;  // optional precomputed selection report
  std::string metrics_path = "metrics.csv";
  std::string report_path;  // optional JSON summary
  std::string data_dir;     // optional dataset cache

  // Throws ConfigError naming the offending key.
  static RunConfig from_file(const ConfigFile& file);
  void validate() const;
};

RunConfig load_run_config(const std::string& path);

struct Datasets {
  ImageBatch train;
  ImageBatch val;
  ImageBatch test_pool;
  ImageBatch source;
};

// Deterministic in DataConfig; loads the cache in `dir` when it holds a
// dataset generated from the same settings.
Datasets make_datasets(const DataConfig& cfg, const std::string& dir = "");
void save_datasets(const Datasets& data, const DataConfig& cfg, const std::string& dir);

struct MetricsRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string method;
  std::size_t stream_pos = 0;
  std::string corruption;
  int severity = 0;
  double batch_err = 0.0;
  double cum_err = 0.0;
  double mean_entropy = 0.0;
  double max_class_frac = 0.0;
  double wall_ms = 0.0;
  std::size_t batch_size = 0;  // not written; used for weighting
};

inline constexpr const char* kMetricsHeader =
    "run_id,seed,method,stream_pos,corruption,severity,batch_err,cum_err,mean_entropy,"
    "max_class_frac,wall_ms";

void write_metrics(const std::vector<MetricsRecord>& records, std::ostream& out);
void write_metrics(const std::vector<MetricsRecord>& records, const std::string& path);
std::vector<MetricsRecord> read_metrics(const std::string& path);

// Collapse: max_class_frac above 0.9 for 10 consecutive batches.
inline constexpr double kCollapseFraction = 0.9;
inline constexpr std::size_t kCollapseRun = 10;
bool detect_collapse(const std::vector<MetricsRecord>& records);

struct RunSummary {
  std::string run_id;
  std::string method;
  std::uint64_t seed = 0;
  double error = 0.0;  // over the whole stream
  std::map<std::string, double> error_by_domain;  // "kind@severity"
  bool collapsed = false;
  double clean_error_before = 0.0;
  double clean_error_after = 0.0;  // running-stats predictor after the stream
  std::vector<std::size_t> selected_blocks;

  nlohmann::json to_json() const;
};

struct RunResult {
  std::vector<MetricsRecord> records;
  RunSummary summary;
};

struct Report {
  std::vector<RunResult> runs;

  std::vector<MetricsRecord> all_records() const;
  nlohmann::json to_json() const;
  // Median over seeds of the stream error of every run labelled `method`.
  double median_error(const std::string& method) const;
};

struct PretrainResult {
  double val_error = 0.0;
  double final_loss = 0.0;
};

// Cross-entropy training with Adam on the clean training set; BN running
// statistics accumulate with the default momentum. Throws NumericError on
// divergence.
template <class T>
PretrainResult pretrain(BlockNet<T>& model, const ImageBatch& train, const ImageBatch& val,
                        const PretrainConfig& cfg);

template <class T>
BlockNet<T> build_and_pretrain(const RunConfig& cfg, const Datasets& data,
                               PretrainResult* result = nullptr);

// Error of argmax predictions on `data` in running-stats mode; when
// `teacher` is given the prediction adds its logits.
template <class T>
double evaluate(BlockNet<T>& model, const ImageBatch& data, BlockNet<T>* teacher = nullptr,
                std::size_t batch_size = 128);

// Blocks for a seed: the configured explicit list, a saved report, or a
// fresh selection run on the clean source set.
template <class T>
SelectionReport selection_for_seed(BlockNet<T>& model, const RunConfig& cfg,
                                   const Datasets& data, std::uint64_t seed);

// Runs one adaptation method over one stream. `label` names the method in
// the records. Step outputs are passed to `observer` when set.
template <class T>
RunResult run_stream(const BlockNet<T>& source, Method method, const AdaptConfig& adapt,
                     const Stream& stream, const Datasets& data, const RunConfig& cfg,
                     std::uint64_t seed, const std::string& label,
                     AdaptState<T>* final_state = nullptr);

template <class T>
Report run_benchmark(const BlockNet<T>& source, const RunConfig& cfg, const Datasets& data);

// Online single-sample protocol: samples arrive one at a time, the last b
// form the update buffer, updates run every round(b / k) samples with both
// learning rates scaled by b / base_batch. Predictions use running
// statistics (the ensemble for dplot).
template <class T>
Report run_single_sample(const BlockNet<T>& source, const RunConfig& cfg, const Datasets& data);

// Variants: "A" (full), "B" (no paired-view consistency), "C" (B without
// teacher and ensemble), "D" (BN-affine entropy on x only, i.e. TENT),
// "gamma=<value>", "menu=<paired|noise_blur|color_jitter|all>".
// Every variant of a seed sees the same stream.
template <class T>
Report run_ablation(const BlockNet<T>& source, const RunConfig& cfg, const Datasets& data);

AdaptConfig variant_config(const std::string& variant, const AdaptConfig& base,
                           const SelectionReport& selection);

double lr_multiplier(std::size_t buffer, std::size_t base_batch);
std::size_t update_cadence(std::size_t buffer, double freq);

}  // namespace dplot
