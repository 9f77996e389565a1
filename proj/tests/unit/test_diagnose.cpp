// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <map>

#include "support/tempdir.hpp"
#include "vibdiag/diagnose.hpp"

using namespace vibdiag;
using diagnose::LabelMetrics;
using spectro::Labels;

namespace {

LabelMetrics counts(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn) {
  LabelMetrics m;
  m.tp = tp;
  m.fp = fp;
  m.tn = tn;
  m.fn = fn;
  return diagnose::finalize(m);
}

std::shared_ptr<spectro::SourcePools> pools(std::uint64_t seed = 21) {
  static std::map<std::uint64_t, std::shared_ptr<spectro::SourcePools>> cache;
  auto& p = cache[seed];
  if (!p) p = diagnose::synthesize_pools(siggen::default_rig(), {}, 5.0, seed);
  return p;
}

}  // namespace

TEST_CASE("per-label metrics from confusion counts", "[diagnose]") {
  const auto perfect = counts(5, 0, 5, 0);
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);
  CHECK(perfect.accuracy == 1.0);

  const auto one_fp = counts(3, 1, 4, 0);
  CHECK(one_fp.precision == Catch::Approx(0.75));
  CHECK(one_fp.recall == 1.0);
  CHECK(one_fp.accuracy == Catch::Approx(7.0 / 8.0));

  const auto none = counts(0, 0, 4, 0);
  CHECK(none.precision == 1.0);
  CHECK(none.recall == 1.0);
  const auto missed = counts(0, 0, 2, 2);
  CHECK(missed.precision == 0.0);
  CHECK(missed.recall == 0.0);
  CHECK(missed.accuracy == Catch::Approx(0.5));
}

TEST_CASE("multi-label evaluation counts each column and exact matches", "[diagnose]") {
  const std::vector<Labels> truth = {{1, 0, 0}, {0, 1, 1}, {1, 1, 0}, {0, 0, 0}};
  const std::vector<Labels> pred = {{1, 0, 0}, {0, 1, 0}, {1, 0, 0}, {1, 0, 0}};
  const auto m = diagnose::evaluate(pred, truth);
  CHECK(m.count == 4);
  CHECK(m.subset_accuracy == Catch::Approx(0.25));
  CHECK(m.labels[0].tp == 2);
  CHECK(m.labels[0].fp == 1);
  CHECK(m.labels[0].tn == 1);
  CHECK(m.labels[1].fn == 1);
  CHECK(m.labels[1].recall == Catch::Approx(0.5));
  CHECK(m.labels[2].fn == 1);
  CHECK(m.labels[2].tn == 3);

  const std::vector<Labels> short_pred(pred.begin(), pred.end() - 1);
  CHECK_THROWS_AS(diagnose::evaluate(short_pred, truth), DataError);

  const std::vector<std::uint8_t> bp = {1, 1, 0, 0}, bt = {1, 0, 0, 1};
  const auto b = diagnose::evaluate_binary(bp, bt);
  CHECK(b.tp == 1);
  CHECK(b.fp == 1);
  CHECK(b.fn == 1);
  CHECK(b.tn == 1);
}

TEST_CASE("a verdict is positive exactly when p >= 0.5", "[diagnose]") {
  const std::vector<float> p = {0.5f, std::nextafter(0.5f, 0.0f), 0.99f};
  const auto d = diagnose::make_diagnosis(p);
  CHECK(d.verdicts == Labels{1, 0, 1});
  CHECK(d.probabilities[2] == 0.99f);
  CHECK_THROWS_AS(diagnose::make_diagnosis(std::vector<float>{0.1f}), DataError);
}

TEST_CASE("stage 1 trains on healthy data only and checks layouts", "[diagnose]") {
  const auto oc = spectro::assemble_one_class_sets(pools(), 1.0, 80, 20, 20, 3);
  diagnose::Stage1Options opts;
  opts.seed = 5;
  CHECK_THROWS_AS(diagnose::stage1_train(oc.test_damaged, opts), DataError);

  const auto model = diagnose::stage1_train(oc.train_healthy, opts);
  CHECK(model.forests.size() == 1);
  CHECK(model.forests[0].params.trees == 100);
  CHECK(model.extractors[0].arch.filters == 16);
  const auto healthy = diagnose::stage1_detect_set(model, oc.test_healthy);
  const auto damaged = diagnose::stage1_detect_set(model, oc.test_damaged);
  double worst_healthy = 1e9, best_damaged = -1e9;
  for (const auto& d : healthy) worst_healthy = std::min(worst_healthy, d.signed_score);
  for (const auto& d : damaged) best_damaged = std::max(best_damaged, d.signed_score);
  CHECK(best_damaged < worst_healthy);
  for (const auto& d : damaged) CHECK(d.is_anomalous == (d.signed_score < 0.0));

  auto seg = oc.test_healthy.at(0);
  seg.layout.stft.log_amplitude = false;
  CHECK_THROWS_AS(diagnose::stage1_detect(model, seg), DataError);

  opts.channels = diagnose::ChannelMode::per_channel;
  const auto per = diagnose::stage1_train(oc.train_healthy, opts);
  CHECK(per.forests.size() == 3);
  CHECK(per.extractors[0].arch.input_channels == 1);
}

TEST_CASE("stage 2 refuses a training partition with a single class", "[diagnose]") {
  const auto oc = spectro::assemble_one_class_sets(pools(), 1.0, 40, 4, 4, 3);
  spectro::LabeledDataset ds;
  ds.train = oc.train_healthy;
  ds.validation = oc.test_healthy;
  ds.test = oc.test_damaged;
  const auto arch = nnet::Architecture::classifier(ds.train.layout());
  nnet::TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(diagnose::stage2_train(ds, cfg, arch), DataError);
}

TEST_CASE("pipeline bundles round-trip bit-exactly and detect corruption", "[diagnose]") {
  testing::TempDir dir;
  const auto ds = spectro::assemble_dataset(pools(), {}, 120, 8);
  nnet::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  auto s2 = diagnose::stage2_train(ds, cfg, nnet::Architecture::classifier(ds.train.layout()));
  const auto oc = spectro::assemble_one_class_sets(pools(), 1.0, 40, 5, 5, 3);
  diagnose::Stage1Options opts;
  opts.forest.trees = 10;
  diagnose::Pipeline p;
  p.stage1 = diagnose::stage1_train(oc.train_healthy, opts);
  p.stage2 = s2.model;
  p.layout = ds.train.layout();
  diagnose::save_pipeline(p, dir.path());
  CHECK(std::filesystem::exists(dir / "manifest.json"));

  const auto back = diagnose::load_pipeline(dir.path());
  REQUIRE(back.stage1);
  REQUIRE(back.stage2);
  for (std::size_t i = 0; i < ds.test.size(); ++i) {
    const auto seg = ds.test.at(i);
    CHECK(diagnose::stage2_diagnose(*back.stage2, seg).probabilities ==
          diagnose::stage2_diagnose(*p.stage2, seg).probabilities);
    CHECK(diagnose::stage1_detect(*back.stage1, seg).signed_score ==
          diagnose::stage1_detect(*p.stage1, seg).signed_score);
  }

  diagnose::Pipeline only2;
  only2.stage2 = s2.model;
  CHECK_THROWS_AS(diagnose::save_pipeline(only2, dir / "other"), DataError);

  const auto victim = dir / "stage2_classifier.cnn";
  std::filesystem::resize_file(victim, std::filesystem::file_size(victim) - 8);
  try {
    diagnose::load_pipeline(dir.path());
    FAIL("expected a checksum error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("checksum") != std::string::npos);
  }
}
