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

#include "dplot/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "dplot/adam.hpp"
#include "dplot/checkpoint.hpp"
#include "dplot/error.hpp"
#include "dplot/losses.hpp"
#include "dplot/ops.hpp"

namespace dplot {
using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& why) {
  throw ConfigError("invalid value '" + value + "' for key '" + key + "': " + why);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || !std::isfinite(out)) bad_value(key, v, "expected a number");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) bad_value(key, v, "expected a non-negative integer");
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "expected true or false");
}

template <class F>
auto with_key(const std::string& key, const std::string& v, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    if (what.find("'" + key + "'") != std::string::npos) throw;
    bad_value(key, v, what);
  }
}

template <class T>
Tensor<T> to_model(const Tensor<float>& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t;
  } else {
    return t.template cast<T>();
  }
}

std::vector<std::size_t> iota(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = begin; i < end; ++i) idx[i - begin] = i;
  return idx;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

json data_meta(const DataConfig& c) {
  return {{"classes", c.classes}, {"train_size", c.train_size},
          {"val_size", c.val_size}, {"test_pool_size", c.test_pool_size},
          {"source_size", c.source_size}, {"seed", c.seed}};
}

bool method_needs_selection(Method m) {
  return m == Method::tent_selected || m == Method::dplot;
}

double max_class_fraction(const std::vector<int>& pred, std::size_t classes) {
  if (pred.empty()) return 0.0;
  std::vector<std::size_t> counts(classes, 0);
  for (int p : pred) ++counts[static_cast<std::size_t>(p)];
  return static_cast<double>(*std::max_element(counts.begin(), counts.end())) /
         static_cast<double>(pred.size());
}

struct Tally {
  std::size_t wrong = 0;
  std::size_t total = 0;
};

// Accumulates records and domain errors for one run.
class RunRecorder {
 public:
  RunRecorder(std::string run_id, std::uint64_t seed, std::string method, std::size_t classes)
      : run_id_(std::move(run_id)), seed_(seed), method_(std::move(method)), classes_(classes) {}

  void add(std::size_t pos, const SegmentInfo& info, const std::vector<int>& pred,
           const std::vector<int>& labels, double mean_entropy, double wall_ms) {
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != labels[i];
    wrong_ += wrong;
    total_ += pred.size();
    Tally& t = domains_[info.kind + "@" + std::to_string(info.severity)];
    t.wrong += wrong;
    t.total += pred.size();
    MetricsRecord r;
    r.run_id = run_id_;
    r.seed = seed_;
    r.method = method_;
    r.stream_pos = pos;
    r.corruption = info.kind;
    r.severity = info.severity;
    r.batch_err = pred.empty() ? 0.0 : static_cast<double>(wrong) / static_cast<double>(pred.size());
    r.cum_err = total_ == 0 ? 0.0 : static_cast<double>(wrong_) / static_cast<double>(total_);
    r.mean_entropy = mean_entropy;
    r.max_class_frac = max_class_fraction(pred, classes_);
    r.wall_ms = wall_ms;
    r.batch_size = pred.size();
    records_.push_back(r);
  }

  RunResult finish() {
    RunResult out;
    out.summary.run_id = run_id_;
    out.summary.method = method_;
    out.summary.seed = seed_;
    out.summary.error =
        total_ == 0 ? 0.0 : static_cast<double>(wrong_) / static_cast<double>(total_);
    for (const auto& [k, t] : domains_) {
      out.summary.error_by_domain[k] = static_cast<double>(t.wrong) / static_cast<double>(t.total);
    }
    out.summary.collapsed = detect_collapse(records_);
    out.records = std::move(records_);
    return out;
  }

 private:
  std::string run_id_;
  std::uint64_t seed_;
  std::string method_;
  std::size_t classes_;
  std::size_t wrong_ = 0;
  std::size_t total_ = 0;
  std::map<std::string, Tally> domains_;
  std::vector<MetricsRecord> records_;
};

std::vector<double> softmax_entropies(const Tensor<double>& logits) {
  return row_entropies(softmax_rows(logits));
}

template <class T>
std::vector<Tensor<T>> warmup_batches(const RunConfig& cfg, const Datasets& data) {
  std::vector<Tensor<T>> out;
  const std::size_t bs = cfg.stream.batch_size;
  for (std::size_t s = 0; s + bs <= data.train.size() && out.size() < cfg.warmup_batches;
       s += bs) {
    out.push_back(to_model<T>(gather(data.train, iota(s, s + bs)).images));
  }
  return out;
}

}  // namespace

ConfigFile ConfigFile::parse(const std::string& text, const std::string& origin) {
  ConfigFile cf;
  std::stringstream ss(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(where + ": expected 'key = value' for key '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    const std::string full = section.empty() ? key : section + "." + key;
    cf.values_[full] = trim(line.substr(eq + 1));
  }
  return cf;
}

ConfigFile ConfigFile::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

RunConfig RunConfig::from_file(const ConfigFile& file) {
  RunConfig c;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const auto size_into = [](std::size_t& dst) {
    return Setter([&dst](const std::string& k, const std::string& v) { dst = parse_size(k, v); });
  };
  const auto u64_into = [](std::uint64_t& dst) {
    return Setter([&dst](const std::string& k, const std::string& v) { dst = parse_u64(k, v); });
  };
  const auto double_into = [](double& dst) {
    return Setter([&dst](const std::string& k, const std::string& v) { dst = parse_double(k, v); });
  };
  const auto bool_into = [](bool& dst) {
    return Setter([&dst](const std::string& k, const std::string& v) { dst = parse_bool(k, v); });
  };
  const auto string_into = [](std::string& dst) {
    return Setter([&dst](const std::string&, const std::string& v) { dst = v; });
  };
  const std::map<std::string, Setter> setters = {
      {"data.classes", size_into(c.data.classes)},
      {"data.train_size", size_into(c.data.train_size)},
      {"data.val_size", size_into(c.data.val_size)},
      {"data.test_pool_size", size_into(c.data.test_pool_size)},
      {"data.source_size", size_into(c.data.source_size)},
      {"data.seed", u64_into(c.data.seed)},
      {"model.seed", u64_into(c.pretrain.model_seed)},
      {"model.precision", string_into(c.precision)},
      {"pretrain.epochs", size_into(c.pretrain.epochs)},
      {"pretrain.lr", double_into(c.pretrain.lr)},
      {"pretrain.batch_size", size_into(c.pretrain.batch_size)},
      {"selection.gamma", double_into(c.gamma)},
      {"selection.perturbation",
       [&c](const std::string& k, const std::string& v) {
         with_key(k, v, [&] {
           c.perturbation.kind = Perturbation::from_json(json{{"kind", v}}).kind;
           return 0;
         });
       }},
      {"selection.mean", double_into(c.perturbation.mean)},
      {"selection.variance", double_into(c.perturbation.variance)},
      {"selection.factor", double_into(c.perturbation.factor)},
      {"selection.epochs", size_into(c.selection.epochs)},
      {"selection.lr", double_into(c.selection.lr)},
      {"selection.batch_size", size_into(c.selection.batch_size)},
      {"adapt.method",
       [&c](const std::string& k, const std::string& v) {
         c.method = with_key(k, v, [&] { return parse_method(v); });
       }},
      {"adapt.lr_entropy", double_into(c.adapt.lr_entropy)},
      {"adapt.lr_consistency", double_into(c.adapt.lr_consistency)},
      {"adapt.alpha", double_into(c.adapt.alpha)},
      {"adapt.ensemble", bool_into(c.adapt.ensemble)},
      {"adapt.post_update_prediction", bool_into(c.adapt.post_update_prediction)},
      {"adapt.menu",
       [&c](const std::string& k, const std::string& v) {
         c.adapt.menu = with_key(k, v, [&] { return parse_menu(v); });
       }},
      {"adapt.menu_views", size_into(c.adapt.menu_views)},
      {"adapt.warmup_batches", size_into(c.warmup_batches)},
      {"adapt.selected_blocks",
       [&c](const std::string& k, const std::string& v) {
         c.adapt.selected_blocks.clear();
         for (const auto& s : split_list(v)) c.adapt.selected_blocks.push_back(parse_size(k, s));
       }},
      {"stream.setting",
       [&c](const std::string& k, const std::string& v) {
         c.stream.setting = with_key(k, v, [&] { return parse_setting(v); });
       }},
      {"stream.kinds",
       [&c](const std::string& k, const std::string& v) {
         c.stream.kinds.clear();
         for (const auto& s : split_list(v)) {
           c.stream.kinds.push_back(with_key(k, v, [&] { return parse_corruption(s); }));
         }
       }},
      {"stream.batches_per_segment", size_into(c.stream.batches_per_segment)},
      {"stream.batch_size", size_into(c.stream.batch_size)},
      {"run.run_id", string_into(c.run_id)},
      {"run.seeds",
       [&c](const std::string& k, const std::string& v) {
         c.seeds.clear();
         for (const auto& s : split_list(v)) c.seeds.push_back(parse_u64(k, s));
       }},
      {"run.methods",
       [&c](const std::string& k, const std::string& v) {
         c.methods.clear();
         for (const auto& s : split_list(v)) {
           c.methods.push_back(with_key(k, v, [&] { return parse_method(s); }));
         }
       }},
      {"run.timing", bool_into(c.timing)},
      {"single_sample.enabled", bool_into(c.single_sample.enabled)},
      {"single_sample.buffer", size_into(c.single_sample.buffer)},
      {"single_sample.freq", double_into(c.single_sample.freq)},
      {"single_sample.base_batch", size_into(c.single_sample.base_batch)},
      {"ablation.variants",
       [&c](const std::string&, const std::string& v) { c.variants = split_list(v); }},
      {"paths.checkpoint", string_into(c.checkpoint_path)},
      {"paths.selection", string_into(c.selection_path)},
      {"paths.metrics", string_into(c.metrics_path)},
      {"paths.report", string_into(c.report_path)},
      {"paths.data_dir", string_into(c.data_dir)},
  };
  for (const auto& [key, value] : file.values()) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    if (value.empty() && key.rfind("paths.", 0) != 0 && key != "adapt.selected_blocks") {
      throw ConfigError("empty value for key '" + key + "'");
    }
    it->second(key, value);
  }
  c.validate();
  return c;
}

void RunConfig::validate() const {
  const auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("invalid value for key '" + key + "': " + why);
  };
  if (data.classes < 2 || data.classes > 8) fail("data.classes", "must be in 2..8");
  if (precision != "f32" && precision != "f64") fail("model.precision", "must be f32 or f64");
  if (!(gamma >= 0.0 && gamma <= 1.0)) fail("selection.gamma", "must lie in [0, 1]");
  if (adapt.lr_entropy < 0.0) fail("adapt.lr_entropy", "must be >= 0");
  if (adapt.lr_consistency < 0.0) fail("adapt.lr_consistency", "must be >= 0");
  if (!(adapt.alpha >= 0.0 && adapt.alpha <= 1.0)) fail("adapt.alpha", "must lie in [0, 1]");
  if (adapt.menu_views < 2) fail("adapt.menu_views", "must be at least 2");
  if (stream.batch_size < 1) fail("stream.batch_size", "must be positive");
  if (stream.batches_per_segment < 1) fail("stream.batches_per_segment", "must be positive");
  if (stream.kinds.empty()) fail("stream.kinds", "needs at least one corruption");
  if (pretrain.batch_size < 2) fail("pretrain.batch_size", "must be at least 2");
  if (selection.batch_size < 2) fail("selection.batch_size", "must be at least 2");
  if (single_sample.buffer < 1) fail("single_sample.buffer", "must be >= 1");
  if (!(single_sample.freq > 0.0)) fail("single_sample.freq", "must be > 0");
  if (seeds.empty()) fail("run.seeds", "needs at least one seed");
  if (data.source_size < data.classes) fail("data.source_size", "must cover every class");
  if (data.val_size < 1) fail("data.val_size", "must be positive");
}

RunConfig load_run_config(const std::string& path) {
  return RunConfig::from_file(ConfigFile::load(path));
}

Datasets make_datasets(const DataConfig& cfg, const std::string& dir) {
  namespace fs = std::filesystem;
  if (!dir.empty() && fs::exists(fs::path(dir) / "train" / "manifest")) {
    json meta;
    Datasets d;
    d.train = load_dataset(fs::path(dir) / "train", &meta);
    if (meta == data_meta(cfg)) {
      d.val = load_dataset(fs::path(dir) / "val");
      d.test_pool = load_dataset(fs::path(dir) / "test_pool");
      d.source = load_dataset(fs::path(dir) / "source");
      return d;
    }
  }
  const Rng root(cfg.seed);
  Rng r1 = root.fork(1), r2 = root.fork(2), r3 = root.fork(3), r4 = root.fork(4);
  Datasets d;
  d.train = gen_shapegrid(cfg.train_size, cfg.classes, r1);
  d.val = gen_shapegrid(cfg.val_size, cfg.classes, r2);
  d.test_pool = gen_shapegrid(cfg.test_pool_size, cfg.classes, r3);
  d.source = gen_shapegrid(cfg.source_size, cfg.classes, r4);
  return d;
}

void save_datasets(const Datasets& data, const DataConfig& cfg, const std::string& dir) {
  namespace fs = std::filesystem;
  const json meta = data_meta(cfg);
  save_dataset(data.train, fs::path(dir) / "train", meta);
  save_dataset(data.val, fs::path(dir) / "val", meta);
  save_dataset(data.test_pool, fs::path(dir) / "test_pool", meta);
  save_dataset(data.source, fs::path(dir) / "source", meta);
}

void write_metrics(const std::vector<MetricsRecord>& records, std::ostream& out) {
  out << kMetricsHeader << "\n";
  char buf[512];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%s,%llu,%s,%zu,%s,%d,%.6f,%.6f,%.6f,%.6f,%.3f\n",
                  r.run_id.c_str(), static_cast<unsigned long long>(r.seed), r.method.c_str(),
                  r.stream_pos, r.corruption.c_str(), r.severity, r.batch_err, r.cum_err,
                  r.mean_entropy, r.max_class_frac, r.wall_ms);
    out << buf;
  }
}

void write_metrics(const std::vector<MetricsRecord>& records, const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw FormatError("cannot write metrics file '" + path + "'");
  write_metrics(records, out);
}

std::vector<MetricsRecord> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read metrics file '" + path + "'");
  std::string line;
  std::getline(in, line);
  if (line != kMetricsHeader) throw FormatError("unexpected metrics header in '" + path + "'");
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 11) throw FormatError("malformed metrics row: " + line);
    MetricsRecord r;
    r.run_id = f[0];
    r.seed = std::stoull(f[1]);
    r.method = f[2];
    r.stream_pos = std::stoull(f[3]);
    r.corruption = f[4];
    r.severity = std::stoi(f[5]);
    r.batch_err = std::stod(f[6]);
    r.cum_err = std::stod(f[7]);
    r.mean_entropy = std::stod(f[8]);
    r.max_class_frac = std::stod(f[9]);
    r.wall_ms = std::stod(f[10]);
    out.push_back(r);
  }
  return out;
}

bool detect_collapse(const std::vector<MetricsRecord>& records) {
  std::size_t run = 0;
  for (const auto& r : records) {
    run = r.max_class_frac > kCollapseFraction ? run + 1 : 0;
    if (run >= kCollapseRun) return true;
  }
  return false;
}

json RunSummary::to_json() const {
  return {{"run_id", run_id},
          {"method", method},
          {"seed", seed},
          {"error", error},
          {"error_by_domain", error_by_domain},
          {"collapsed", collapsed},
          {"clean_error_before", clean_error_before},
          {"clean_error_after", clean_error_after},
          {"selected_blocks", selected_blocks}};
}

std::vector<MetricsRecord> Report::all_records() const {
  std::vector<MetricsRecord> out;
  for (const auto& r : runs) out.insert(out.end(), r.records.begin(), r.records.end());
  return out;
}

double Report::median_error(const std::string& method) const {
  std::vector<double> v;
  for (const auto& r : runs) {
    if (r.summary.method == method) v.push_back(r.summary.error);
  }
  return median(v);
}

json Report::to_json() const {
  json runs_j = json::array();
  std::vector<std::string> methods;
  for (const auto& r : runs) {
    runs_j.push_back(r.summary.to_json());
    if (std::find(methods.begin(), methods.end(), r.summary.method) == methods.end()) {
      methods.push_back(r.summary.method);
    }
  }
  json medians = json::object();
  for (const auto& m : methods) medians[m] = median_error(m);
  return {{"runs", runs_j}, {"median_error", medians}};
}

template <class T>
double evaluate(BlockNet<T>& model, const ImageBatch& data, BlockNet<T>* teacher,
                std::size_t batch_size) {
  std::size_t wrong = 0;
  for (std::size_t s = 0; s < data.size(); s += batch_size) {
    const std::size_t e = std::min(data.size(), s + batch_size);
    const ImageBatch b = gather(data, iota(s, e));
    const Tensor<T> x = to_model<T>(b.images);
    Tensor<T> logits = model.infer(x, ForwardOptions::running()).logits;
    if (teacher != nullptr) {
      const Tensor<T> t = teacher->infer(x, ForwardOptions::running()).logits;
      for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += t[i];
    }
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != b.labels[i];
  }
  return data.size() == 0 ? 0.0 : static_cast<double>(wrong) / static_cast<double>(data.size());
}

template <class T>
PretrainResult pretrain(BlockNet<T>& model, const ImageBatch& train, const ImageBatch& val,
                        const PretrainConfig& cfg) {
  if (cfg.batch_size < 2) throw ConfigError("pretrain batch_size must be at least 2");
  const std::vector<ParamId> all = model.all_params();
  AdamState<T> opt({cfg.lr}, all, model.params());
  const Rng root(cfg.model_seed);
  PretrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = root.fork(1000 + epoch);
    const std::vector<std::size_t> perm = rng.permutation(train.size());
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s + 2 <= train.size(); s += cfg.batch_size) {
      const std::size_t e = std::min(train.size(), s + cfg.batch_size);
      const ImageBatch b =
          gather(train, std::vector<std::size_t>(perm.begin() + s, perm.begin() + e));
      Tape<T> tape;
      auto fv = model.forward(tape, to_model<T>(b.images), ForwardOptions::batch(true), all);
      const Var<T> loss = labeled_cross_entropy(fv.logits, b.labels);
      total += static_cast<double>(loss.value().item());
      ++batches;
      opt.apply(model.params(), tape.backward(loss));
    }
    result.final_loss = batches == 0 ? 0.0 : total / static_cast<double>(batches);
  }
  result.val_error = evaluate(model, val);
  return result;
}

template <class T>
BlockNet<T> build_and_pretrain(const RunConfig& cfg, const Datasets& data,
                               PretrainResult* result) {
  Rng rng(cfg.pretrain.model_seed);
  BlockNet<T> model = BlockNet<T>::build(desk_arch(cfg.data.classes), rng);
  const PretrainResult r = pretrain(model, data.train, data.val, cfg.pretrain);
  if (result != nullptr) *result = r;
  return model;
}

template <class T>
SelectionReport selection_for_seed(BlockNet<T>& model, const RunConfig& cfg,
                                   const Datasets& data, std::uint64_t seed) {
  if (!cfg.adapt.selected_blocks.empty()) {
    SelectionReport r;
    r.gamma = cfg.gamma;
    r.selected = cfg.adapt.selected_blocks;
    r.seed = seed;
    return r;
  }
  if (!cfg.selection_path.empty()) {
    SelectionReport r = load_selection(cfg.selection_path);
    if (!r.scaled.empty()) {
      r.gamma = cfg.gamma;
      r.selected = threshold_blocks(r.scaled, cfg.gamma);
    }
    return r;
  }
  return select_blocks(model, data.source, cfg.gamma, cfg.perturbation, cfg.selection, seed);
}

template <class T>
RunResult run_stream(const BlockNet<T>& source, Method method, const AdaptConfig& adapt,
                     const Stream& stream, const Datasets& data, const RunConfig& cfg,
                     std::uint64_t seed, const std::string& label, AdaptState<T>* final_state) {
  AdaptState<T> state = AdaptState<T>::create(source, method, adapt, seed);
  if (cfg.warmup_batches > 0 && method == Method::dplot) {
    warmup(state, warmup_batches<T>(cfg, data), cfg.warmup_batches);
  }
  RunRecorder rec(cfg.run_id, seed, label, source.num_classes());
  for (std::size_t pos = 0; pos < stream.num_batches(); ++pos) {
    const StreamBatch b = stream.batch(pos);
    const auto t0 = std::chrono::steady_clock::now();
    const StepOutput out = adapt_step(state, to_model<T>(b.batch.images));
    const double ms =
        cfg.timing
            ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()
            : 0.0;
    rec.add(pos, b.info, out.predictions, b.batch.labels, out.mean_entropy, ms);
  }
  RunResult result = rec.finish();
  BlockNet<T> before = source;
  result.summary.clean_error_before = evaluate(before, data.val);
  const bool ensemble = method == Method::dplot && adapt.teacher && adapt.ensemble;
  result.summary.clean_error_after =
      evaluate(state.student, data.val, ensemble ? &state.teacher : nullptr);
  result.summary.selected_blocks = adapt.selected_blocks;
  if (final_state != nullptr) *final_state = std::move(state);
  return result;
}

template <class T>
Report run_benchmark(const BlockNet<T>& source, const RunConfig& cfg, const Datasets& data) {
  const std::vector<Method> methods =
      cfg.methods.empty() ? std::vector<Method>{Method::source, Method::bn1, Method::tent,
                                                Method::tent_selected, Method::dplot}
                          : cfg.methods;
  const auto pool = std::make_shared<const ImageBatch>(data.test_pool);
  Report report;
  for (std::uint64_t seed : cfg.seeds) {
    StreamSpec spec = cfg.stream;
    spec.seed = seed;
    const Stream stream(spec, pool);
    std::optional<SelectionReport> selection;
    for (Method m : methods) {
      AdaptConfig adapt = cfg.adapt;
      if (method_needs_selection(m)) {
        if (!selection) {
          BlockNet<T> probe = source;
          selection = selection_for_seed(probe, cfg, data, seed);
        }
        adapt.selected_blocks = selection->selected;
      }
      report.runs.push_back(run_stream(source, m, adapt, stream, data, cfg, seed, to_string(m)));
    }
  }
  return report;
}

double lr_multiplier(std::size_t buffer, std::size_t base_batch) {
  if (buffer == 0 || base_batch == 0) throw ConfigError("buffer and base batch must be positive");
  return static_cast<double>(buffer) / static_cast<double>(base_batch);
}

std::size_t update_cadence(std::size_t buffer, double freq) {
  if (!(freq > 0.0)) throw ConfigError("single_sample.freq must be > 0");
  const double c = std::round(static_cast<double>(buffer) / freq);
  return c < 1.0 ? 1 : static_cast<std::size_t>(c);
}

template <class T>
Report run_single_sample(const BlockNet<T>& source, const RunConfig& cfg, const Datasets& data) {
  const Method method = cfg.method;
  if (method == Method::bn1) throw ConfigError("bn1 cannot predict single samples");
  const std::size_t b = cfg.single_sample.buffer;
  const std::size_t base = cfg.single_sample.base_batch == 0 ? cfg.stream.batch_size
                                                             : cfg.single_sample.base_batch;
  const double mult = lr_multiplier(b, base);
  const std::size_t cadence = update_cadence(b, cfg.single_sample.freq);
  const auto pool = std::make_shared<const ImageBatch>(data.test_pool);
  Report report;
  for (std::uint64_t seed : cfg.seeds) {
    StreamSpec spec = cfg.stream;
    spec.seed = seed;
    const Stream stream(spec, pool);
    AdaptConfig adapt = cfg.adapt;
    adapt.lr_entropy *= mult;
    adapt.lr_consistency *= mult;
    // Update steps only train; their own predictions are not used.
    adapt.post_update_prediction = false;
    if (method_needs_selection(method)) {
      BlockNet<T> probe = source;
      adapt.selected_blocks = selection_for_seed(probe, cfg, data, seed).selected;
    }
    AdaptState<T> state = AdaptState<T>::create(source, method, adapt, seed);
    const bool ensemble = method == Method::dplot && adapt.teacher && adapt.ensemble;

    // The whole stream, sample by sample.
    std::vector<StreamBatch> batches;
    for (std::size_t p = 0; p < stream.num_batches(); ++p) batches.push_back(stream.batch(p));
    const std::size_t per_batch = spec.batch_size;
    const std::size_t total = batches.size() * per_batch;
    const std::size_t sample_numel = kImageChannels * kImageSize * kImageSize;
    const auto sample_ptr = [&](std::size_t i) {
      return batches[i / per_batch].batch.images.ptr() + (i % per_batch) * sample_numel;
    };
    const auto stack = [&](std::size_t begin, std::size_t end) {
      Tensor<float> x = Tensor<float>::uninitialized(
          {end - begin, kImageChannels, kImageSize, kImageSize});
      for (std::size_t i = begin; i < end; ++i) {
        std::copy_n(sample_ptr(i), sample_numel, x.ptr() + (i - begin) * sample_numel);
      }
      return to_model<T>(x);
    };

    std::vector<int> pred(total);
    std::vector<double> entropy(total);
    std::size_t i = 0;
    while (i < total) {
      const std::size_t end = std::min(total, (i / cadence + 1) * cadence);
      for (std::size_t s = i; s < end; s += 128) {
        const std::size_t e = std::min(end, s + 128);
        const Tensor<T> x = stack(s, e);
        Tensor<T> logits = state.student.infer(x, ForwardOptions::running()).logits;
        if (ensemble) {
          const Tensor<T> t = state.teacher.infer(x, ForwardOptions::running()).logits;
          for (std::size_t k = 0; k < logits.size(); ++k) logits[k] += t[k];
        }
        const Tensor<double> ld = logits.template cast<double>();
        const auto p = argmax_rows(ld);
        const auto h = softmax_entropies(ld);
        std::copy(p.begin(), p.end(), pred.begin() + static_cast<std::ptrdiff_t>(s));
        std::copy(h.begin(), h.end(), entropy.begin() + static_cast<std::ptrdiff_t>(s));
      }
      i = end;
      if (method != Method::source && i % cadence == 0) {
        const std::size_t lo = i >= b ? i - b : 0;
        adapt_step(state, stack(lo, i));
      }
    }

    RunRecorder rec(cfg.run_id, seed, to_string(method), source.num_classes());
    for (std::size_t p = 0; p < batches.size(); ++p) {
      const std::vector<int> bp(pred.begin() + static_cast<std::ptrdiff_t>(p * per_batch),
                                pred.begin() + static_cast<std::ptrdiff_t>((p + 1) * per_batch));
      double h = 0.0;
      for (std::size_t k = 0; k < per_batch; ++k) h += entropy[p * per_batch + k];
      rec.add(p, batches[p].info, bp, batches[p].batch.labels,
              h / static_cast<double>(per_batch), 0.0);
    }
    RunResult result = rec.finish();
    BlockNet<T> before = source;
    result.summary.clean_error_before = evaluate(before, data.val);
    result.summary.clean_error_after =
        evaluate(state.student, data.val, ensemble ? &state.teacher : nullptr);
    result.summary.selected_blocks = adapt.selected_blocks;
    report.runs.push_back(std::move(result));
  }
  return report;
}

AdaptConfig variant_config(const std::string& variant, const AdaptConfig& base,
                           const SelectionReport& selection) {
  AdaptConfig c = base;
  c.selected_blocks = selection.selected;
  if (variant == "A") return c;
  if (variant == "B" || variant == "C") {
    c.consistency = false;
    if (variant == "C") {
      c.teacher = false;
      c.ensemble = false;
    }
    return c;
  }
  if (variant == "D") {
    c.entropy_scope = EntropyScope::bn_affine;
    c.entropy_on_pair = false;
    c.consistency = false;
    c.teacher = false;
    c.ensemble = false;
    c.post_update_prediction = false;
    return c;
  }
  if (variant.rfind("gamma=", 0) == 0) {
    const std::string v = variant.substr(6);
    const double g = parse_double("ablation.variants", v);
    if (selection.scaled.empty()) {
      throw ConfigError("variant '" + variant + "' needs scaled similarities");
    }
    c.selected_blocks = threshold_blocks(selection.scaled, g);
    if (c.selected_blocks.empty()) c.entropy_scope = EntropyScope::none;
    return c;
  }
  if (variant.rfind("menu=", 0) == 0) {
    c.menu = parse_menu(variant.substr(5));
    return c;
  }
  throw ConfigError("unknown ablation variant '" + variant + "'");
}

template <class T>
Report run_ablation(const BlockNet<T>& source, const RunConfig& cfg, const Datasets& data) {
  const std::vector<std::string> variants =
      cfg.variants.empty() ? std::vector<std::string>{"A", "B", "C", "D"} : cfg.variants;
  const auto pool = std::make_shared<const ImageBatch>(data.test_pool);
  Report report;
  for (std::uint64_t seed : cfg.seeds) {
    StreamSpec spec = cfg.stream;
    spec.seed = seed;
    const Stream stream(spec, pool);
    BlockNet<T> probe = source;
    const SelectionReport selection = selection_for_seed(probe, cfg, data, seed);
    for (const auto& v : variants) {
      const AdaptConfig adapt = variant_config(v, cfg.adapt, selection);
      report.runs.push_back(run_stream(source, Method::dplot, adapt, stream, data, cfg, seed, v));
    }
  }
  return report;
}

#define DPLOT_INSTANTIATE_HARNESS(T)                                                          \
  template double evaluate(BlockNet<T>&, const ImageBatch&, BlockNet<T>*, std::size_t);       \
  template PretrainResult pretrain(BlockNet<T>&, const ImageBatch&, const ImageBatch&,        \
                                   const PretrainConfig&);                                    \
  template BlockNet<T> build_and_pretrain(const RunConfig&, const Datasets&, PretrainResult*); \
  template SelectionReport selection_for_seed(BlockNet<T>&, const RunConfig&,                 \
                                              const Datasets&, std::uint64_t);                \
  template RunResult run_stream(const BlockNet<T>&, Method, const AdaptConfig&,               \
                                const Stream&, const Datasets&, const RunConfig&,             \
                                std::uint64_t, const std::string&, AdaptState<T>*);           \
  template Report run_benchmark(const BlockNet<T>&, const RunConfig&, const Datasets&);       \
  template Report run_single_sample(const BlockNet<T>&, const RunConfig&, const Datasets&);   \
  template Report run_ablation(const BlockNet<T>&, const RunConfig&, const Datasets&);

DPLOT_INSTANTIATE_HARNESS(float)
DPLOT_INSTANTIATE_HARNESS(double)

}  // namespace dplot
