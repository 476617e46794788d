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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <sstream>

#include "dplot/harness.hpp"

namespace dplot {
namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string error_of(const std::string& text) {
  try {
    RunConfig::from_file(ConfigFile::parse(text));
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(Config, SectionsCommentsAndValues) {
  const auto cfg = RunConfig::from_file(ConfigFile::parse(
      "# desk run\n"
      "[adapt]\n"
      "method = tent+selection   # trailing comment\n"
      "alpha = 0.99\n"
      "[stream]\n"
      "setting = continual\n"
      "kinds = gaussian_noise, blur\n"
      "[run]\n"
      "seeds = 0,1,2\n"));
  EXPECT_EQ(cfg.method, Method::tent_selected);
  EXPECT_DOUBLE_EQ(cfg.adapt.alpha, 0.99);
  EXPECT_EQ(cfg.stream.setting, StreamSetting::continual);
  EXPECT_EQ(cfg.stream.kinds.size(), 2u);
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{0, 1, 2}));
}

TEST(Config, ErrorsNameTheKeyOrLine) {
  EXPECT_NE(error_of("adapt.alphx = 1").find("adapt.alphx"), std::string::npos);
  EXPECT_NE(error_of("adapt.alpha = lots").find("adapt.alpha"), std::string::npos);
  EXPECT_NE(error_of("adapt.alpha = 2").find("alpha"), std::string::npos);
  EXPECT_NE(error_of("stream.kinds = fog").find("stream.kinds"), std::string::npos);
  EXPECT_NE(error_of("selection.gamma = 1.5").find("gamma"), std::string::npos);
  EXPECT_NE(error_of("\n\nno equals sign").find("3"), std::string::npos);
  EXPECT_THROW(load_run_config("/nonexistent/dplot.cfg"), ConfigError);
}

TEST(Metrics, HeaderAndRoundTrip) {
  std::vector<MetricsRecord> recs(2);
  recs[0] = {"r", 3, "dplot", 0, "blur", 2, 0.25, 0.25, 1.2, 0.5, 0.0, 8};
  recs[1] = {"r", 3, "dplot", 1, "blur", 3, 0.5, 0.375, 1.1, 0.75, 0.0, 8};
  std::ostringstream os;
  write_metrics(recs, os);
  const std::string text = os.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), kMetricsHeader);
  EXPECT_EQ(std::string(kMetricsHeader),
            "run_id,seed,method,stream_pos,corruption,severity,batch_err,cum_err,mean_entropy,"
            "max_class_frac,wall_ms");
  const auto path = std::filesystem::temp_directory_path() / "dplot_metrics_rt.csv";
  write_metrics(recs, path.string());
  const auto back = read_metrics(path.string());
  std::filesystem::remove(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].corruption, "blur");
  EXPECT_EQ(back[1].severity, 3);
  EXPECT_DOUBLE_EQ(back[1].cum_err, 0.375);
}

TEST(Metrics, CollapseNeedsTenConsecutiveBatches) {
  std::vector<MetricsRecord> recs(20);
  for (std::size_t i = 0; i < 20; ++i) recs[i].max_class_frac = (i >= 5 && i < 14) ? 0.95 : 0.5;
  EXPECT_FALSE(detect_collapse(recs));
  recs[14].max_class_frac = 0.95;
  EXPECT_TRUE(detect_collapse(recs));
}

TEST(SingleSample, LearningRateMultiplierAndCadence) {
  EXPECT_DOUBLE_EQ(lr_multiplier(64, 200), 0.32);
  EXPECT_DOUBLE_EQ(lr_multiplier(8, 64), 0.125);
  EXPECT_EQ(update_cadence(64, 0.25), 256u);
  EXPECT_EQ(update_cadence(64, 1.0), 64u);
  EXPECT_EQ(update_cadence(8, 16.0), 1u);
  EXPECT_THROW(update_cadence(8, 0.0), ConfigError);
}

TEST(Datasets, DeterministicAndSized) {
  DataConfig d;
  d.train_size = 40;
  d.val_size = 20;
  d.test_pool_size = 24;
  d.source_size = 8;
  const auto a = make_datasets(d), b = make_datasets(d);
  EXPECT_TRUE(bitwise_equal(a.train.images, b.train.images));
  EXPECT_TRUE(bitwise_equal(a.test_pool.images, b.test_pool.images));
  EXPECT_EQ(a.val.size(), 20u);
  EXPECT_EQ(a.source.size(), 8u);
  EXPECT_FALSE(bitwise_equal(a.train.images, a.val.images));
}

TEST(Pretrain, ZeroEpochsIsChanceLevel) {
  RunConfig cfg;
  cfg.data.train_size = 64;
  cfg.data.val_size = 800;
  cfg.data.test_pool_size = 8;
  cfg.data.source_size = 8;
  cfg.pretrain.epochs = 0;
  const auto data = make_datasets(cfg.data);
  PretrainResult r;
  build_and_pretrain<float>(cfg, data, &r);
  EXPECT_NEAR(r.val_error, 0.75, 0.1);
}

// Shared small pretrained model for the behavioural checks below.
class Trained : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = std::make_unique<RunConfig>();
    cfg_->data.train_size = 2000;
    cfg_->data.val_size = 400;
    cfg_->data.test_pool_size = 640;
    cfg_->data.source_size = 128;
    cfg_->pretrain.epochs = 2;
    data_ = std::make_unique<Datasets>(make_datasets(cfg_->data));
    PretrainResult r;
    model_ = std::make_unique<BlockNet<float>>(build_and_pretrain<float>(*cfg_, *data_, &r));
    val_error_ = r.val_error;
  }
  static void TearDownTestSuite() {
    model_.reset();
    data_.reset();
    cfg_.reset();
  }

  static RunConfig stream_cfg(CorruptionKind kind, std::size_t batches, std::size_t batch_size) {
    RunConfig c = *cfg_;
    c.stream.setting = StreamSetting::continual;
    c.stream.kinds = {kind};
    c.stream.batches_per_segment = batches;
    c.stream.batch_size = batch_size;
    return c;
  }

  static std::unique_ptr<RunConfig> cfg_;
  static std::unique_ptr<Datasets> data_;
  static std::unique_ptr<BlockNet<float>> model_;
  static double val_error_;
};

std::unique_ptr<RunConfig> Trained::cfg_;
std::unique_ptr<Datasets> Trained::data_;
std::unique_ptr<BlockNet<float>> Trained::model_;
double Trained::val_error_ = 1.0;

TEST_F(Trained, PretrainingLearnsTheTask) { EXPECT_LT(val_error_, 0.1); }

TEST_F(Trained, StreamRunIsDeterministicAndCumulative) {
  const RunConfig c = stream_cfg(CorruptionKind::contrast, 4, 16);
  const auto pool = std::make_shared<const ImageBatch>(data_->test_pool);
  StreamSpec spec = c.stream;
  spec.seed = 3;
  const Stream stream(spec, pool);
  AdaptConfig a;
  a.selected_blocks = {1, 2};
  const auto r1 = run_stream(*model_, Method::dplot, a, stream, *data_, c, 3, "dplot");
  const auto r2 = run_stream(*model_, Method::dplot, a, stream, *data_, c, 3, "dplot");
  std::ostringstream s1, s2;
  write_metrics(r1.records, s1);
  write_metrics(r2.records, s2);
  EXPECT_EQ(s1.str(), s2.str());
  double wrong = 0.0, seen = 0.0;
  for (const auto& rec : r1.records) {
    wrong += rec.batch_err * 16.0;
    seen += 16.0;
    EXPECT_NEAR(rec.cum_err, wrong / seen, 1e-12);
    EXPECT_EQ(rec.wall_ms, 0.0);
  }
  EXPECT_NEAR(r1.summary.error, wrong / seen, 1e-12);
}

TEST_F(Trained, Bn1NoWorseThanSourceOnGaussianStream) {
  const RunConfig c = stream_cfg(CorruptionKind::gaussian_noise, 4, 32);
  const auto pool = std::make_shared<const ImageBatch>(data_->test_pool);
  std::vector<double> src, bn1;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    StreamSpec spec = c.stream;
    spec.seed = seed;
    const Stream stream(spec, pool);
    src.push_back(run_stream(*model_, Method::source, {}, stream, *data_, c, seed, "source").summary.error);
    bn1.push_back(run_stream(*model_, Method::bn1, {}, stream, *data_, c, seed, "bn1").summary.error);
  }
  EXPECT_LE(median(bn1), median(src));
}

TEST_F(Trained, RepeatedCorruptedBatchImproves) {
  std::vector<double> before, after;
  auto probe = *model_;
  SelectionConfig sc;
  sc.batch_size = 32;
  const auto sel = select_blocks(probe, data_->source, 0.75, Perturbation{}, sc, 0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    std::vector<std::size_t> idx(32);
    for (auto& i : idx) i = rng.below(data_->test_pool.size());
    const ImageBatch clean = gather(data_->test_pool, idx);
    Rng noise = rng.fork(1);
    const ImageBatch x = corrupt(clean, {CorruptionKind::gaussian_noise, 5}, noise);
    const auto err = [&](const std::vector<int>& pred) {
      double e = 0.0;
      for (std::size_t i = 0; i < pred.size(); ++i) e += pred[i] != x.labels[i];
      return e / static_cast<double>(pred.size());
    };
    AdaptConfig a;
    a.selected_blocks = sel.selected;
    auto st = AdaptState<float>::create(*model_, Method::dplot, a, seed);
    // Prediction of the unadapted pair: student plus teacher with batch statistics.
    BlockNet<float> m = *model_;
    before.push_back(err(argmax_rows(m.infer(x.images, ForwardOptions::batch(false)).logits)));
    StepOutput out;
    for (int i = 0; i < 20; ++i) out = dplot_step(st, x.images);
    after.push_back(err(out.predictions));
  }
  EXPECT_LE(median(after), median(before));
}

TEST_F(Trained, WarmupKeepsCleanError) {
  AdaptConfig a;
  a.selected_blocks = {1};
  auto st = AdaptState<float>::create(*model_, Method::dplot, a, 0);
  std::vector<Tensor<float>> batches;
  for (std::size_t i = 0; i < 50; ++i) {
    std::vector<std::size_t> idx(32);
    for (std::size_t k = 0; k < 32; ++k) idx[k] = (i * 32 + k) % data_->train.size();
    batches.push_back(gather(data_->train, idx).images);
  }
  BlockNet<float> m = *model_;
  const double before = evaluate(m, data_->val);
  warmup(st, batches, 50);
  const double after = evaluate(st.student, data_->val, &st.teacher);
  EXPECT_LE(after, before + 0.02);
}

TEST_F(Trained, SingleSampleRunsWithoutNumericFailure) {
  RunConfig c = stream_cfg(CorruptionKind::gaussian_noise, 2, 16);
  c.method = Method::dplot;
  c.adapt.selected_blocks = {1, 2};
  c.single_sample.enabled = true;
  c.single_sample.buffer = 8;
  c.seeds = {0};
  const auto report = run_single_sample(*model_, c, *data_);
  ASSERT_EQ(report.runs.size(), 1u);
  EXPECT_EQ(report.runs[0].records.size(), 2u);
  EXPECT_TRUE(std::isfinite(report.runs[0].summary.error));
}

TEST_F(Trained, VariantsResolve) {
  SelectionReport sel;
  sel.selected = {1, 2};
  sel.scaled = {1.0, 0.8, 0.3, 0.2, 0.1, 0.0};
  const AdaptConfig base;
  EXPECT_FALSE(variant_config("B", base, sel).consistency);
  EXPECT_FALSE(variant_config("C", base, sel).teacher);
  const auto d = variant_config("D", base, sel);
  EXPECT_EQ(d.entropy_scope, EntropyScope::bn_affine);
  EXPECT_EQ(variant_config("gamma=0.5", base, sel).selected_blocks,
            (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(variant_config("gamma=0.9", base, sel).selected_blocks, (std::vector<std::size_t>{1}));
  EXPECT_EQ(variant_config("menu=all", base, sel).menu, PseudoLabelMenu::all);
  EXPECT_THROW(variant_config("E", base, sel), ConfigError);
}

}  // namespace
}  // namespace dplot
