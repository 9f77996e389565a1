// SPDX-License-Identifier: Apache-2.0

#include "vibdiag/cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "vibdiag/common.hpp"
#include "vibdiag/diagnose.hpp"
#include "vibdiag/experiment.hpp"
#include "vibdiag/io.hpp"
#include "vibdiag/render.hpp"
#include "vibdiag/siggen.hpp"
#include "vibdiag/spectro.hpp"

namespace vibdiag::cli {

namespace {

namespace fs = std::filesystem;
using experiment::DataBundle;
using experiment::RunConfig;
using nlohmann::json;

constexpr const char* kVersion = "0.1.0";
constexpr const char* kSignalsManifest = "signals.json";
constexpr const char* kSpectrogramsManifest = "spectrograms.json";

using SourcePaths = std::array<std::array<fs::path, 2>, kComponentCount>;

struct Context {
  RunConfig cfg;
  std::ostream& out;
  std::ostream& err;
  bool quiet = false;

  void log(const std::string& msg) const {
    if (!quiet) out << msg << "\n" << std::flush;
  }
};

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

std::string file_stem(Component c, Health h) {
  return std::string(to_string(c)) + "_" + std::string(to_string(h));
}

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw DataError(what + ": '" + p.string() + "' does not exist");
}

RunConfig load_config(const std::optional<std::string>& flag) {
  RunConfig cfg;
  std::string path;
  if (flag) {
    path = *flag;
  } else if (const char* env = std::getenv("VIBDIAG_CONFIG"); env && *env) {
    path = env;
  }
  if (path.empty()) return cfg;
  if (!fs::exists(path)) throw ConfigError("config file '" + path + "' not found");
  json j = json::parse(io::read_file(path), nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file '" + path + "' is not valid JSON");
  return experiment::config_from_json(j, cfg);
}

// ---- steps shared by the subcommands and the demo ---------------------------

std::uint64_t signal_seed(const RunConfig& cfg, Component c, Health h) {
  return derive_seed(derive_seed(cfg.seed, "signals"),
                     "signal/" + std::string(to_string(c)) + "/" + std::string(to_string(h)));
}

fs::path step_generate(const Context& ctx, const fs::path& dir, siggen::SampleFormat format, double duration_s) {
  const RunConfig& cfg = ctx.cfg;
  siggen::validate(cfg.rig);
  if (cfg.rig.components.size() != kComponentCount) {
    throw ConfigError("config.rig.components: expected exactly 3 components");
  }
  const std::string ext = format == siggen::SampleFormat::csv ? ".csv" : ".f32";
  json entries = json::array();
  for (std::size_t c = 0; c < kComponentCount; ++c) {
    for (Health h : {Health::healthy, Health::damaged}) {
      const std::uint64_t seed = signal_seed(cfg, kComponents[c], h);
      const auto ts = siggen::generate_signal(cfg.rig.components[c], cfg.rig, h, duration_s, seed);
      const std::string name = file_stem(kComponents[c], h) + ext;
      siggen::save_timeseries(ts, dir / name, format);
      entries.push_back({{"component", to_string(kComponents[c])},
                         {"health", to_string(h)},
                         {"file", name},
                         {"seed", seed},
                         {"samples", ts.samples.size()}});
      ctx.log("generated " + (dir / name).string());
    }
  }
  const fs::path manifest = dir / kSignalsManifest;
  io::write_json_atomic(manifest, {{"format", "vibdiag.signals"},
                                   {"version", 1},
                                   {"seed", cfg.seed},
                                   {"sample_rate_hz", cfg.rig.sample_rate_hz},
                                   {"duration_s", duration_s},
                                   {"sample_format", to_string(format)},
                                   {"rig", siggen::to_json(cfg.rig)},
                                   {"entries", entries}});
  return manifest;
}

std::shared_ptr<spectro::SourcePools> pools_from_signals(const Context& ctx, const fs::path& manifest) {
  const json j = io::read_json(manifest);
  const std::string where = "'" + manifest.string() + "'";
  if (j.value("format", "") != "vibdiag.signals") throw DataError(where + ": not a signals manifest");
  auto pools = std::make_shared<spectro::SourcePools>();
  try {
    const double fs_hz = j.at("sample_rate_hz").get<double>();
    const auto format = siggen::parse_sample_format(j.at("sample_format").get<std::string>());
    for (const auto& e : j.at("entries")) {
      const Component c = parse_component(e.at("component").get<std::string>());
      const Health h = parse_health(e.at("health").get<std::string>());
      const fs::path file = manifest.parent_path() / e.at("file").get<std::string>();
      auto ts = siggen::load_timeseries(file, format, fs_hz, std::string(to_string(c)), h);
      ts.seed = e.at("seed").get<std::uint64_t>();
      auto spec = std::make_shared<spectro::Spectrogram>(spectro::stft(ts, ctx.cfg.stft));
      spec->channel = std::string(to_string(c));
      pools->set(c, h, std::move(spec));
    }
  } catch (const json::exception& e) {
    throw DataError(where + ": " + e.what());
  }
  for (Component c : kComponents) {
    for (Health h : {Health::healthy, Health::damaged}) {
      if (!pools->has(c, h)) throw DataError(where + ": no " + file_stem(c, h) + " recording listed");
    }
  }
  pools->validate();
  return pools;
}

SourcePaths step_save_spectrograms(const Context& ctx, const spectro::SourcePools& pools, const fs::path& dir) {
  SourcePaths paths;
  json sources = json::object();
  for (std::size_t c = 0; c < kComponentCount; ++c) {
    for (Health h : {Health::healthy, Health::damaged}) {
      const std::string name = file_stem(kComponents[c], h) + ".spec";
      spectro::save_spectrogram(pools.at(kComponents[c], h), dir / name);
      paths[c][static_cast<std::size_t>(h)] = dir / name;
      sources[std::string(to_string(kComponents[c]))][std::string(to_string(h))] = name;
    }
  }
  io::write_json_atomic(dir / kSpectrogramsManifest, {{"format", "vibdiag.spectrograms"},
                                                      {"version", 1},
                                                      {"stft", spectro::to_json(pools.config())},
                                                      {"sample_rate_hz", pools.sample_rate_hz()},
                                                      {"sources", sources}});
  ctx.log("wrote spectrograms to " + dir.string());
  return paths;
}

std::pair<std::shared_ptr<spectro::SourcePools>, SourcePaths> load_spectrogram_manifest(const fs::path& manifest) {
  const json j = io::read_json(manifest);
  const std::string where = "'" + manifest.string() + "'";
  if (j.value("format", "") != "vibdiag.spectrograms") throw DataError(where + ": not a spectrogram manifest");
  auto pools = std::make_shared<spectro::SourcePools>();
  SourcePaths paths;
  try {
    for (std::size_t c = 0; c < kComponentCount; ++c) {
      for (Health h : {Health::healthy, Health::damaged}) {
        const fs::path p = manifest.parent_path() /
                           j.at("sources").at(std::string(to_string(kComponents[c]))).at(std::string(to_string(h))).get<std::string>();
        pools->set(kComponents[c], h, std::make_shared<spectro::Spectrogram>(spectro::load_spectrogram(p)));
        paths[c][static_cast<std::size_t>(h)] = p;
      }
    }
  } catch (const json::exception& e) {
    throw DataError(where + ": " + e.what());
  }
  pools->validate();
  return {pools, paths};
}

DataBundle step_build_dataset(const Context& ctx, std::shared_ptr<const spectro::SourcePools> pools,
                              const SourcePaths& sources, const fs::path& manifest, std::size_t export_segments) {
  DataBundle data = experiment::assemble(ctx.cfg, std::move(pools));
  std::array<std::array<std::string, 2>, kComponentCount> rel;
  const fs::path base = manifest.parent_path().empty() ? fs::path(".") : manifest.parent_path();
  for (std::size_t c = 0; c < kComponentCount; ++c) {
    for (std::size_t h = 0; h < 2; ++h) rel[c][h] = fs::proximate(sources[c][h], base).generic_string();
  }
  experiment::save_dataset_manifest(data, ctx.cfg, manifest, rel);
  const auto& r = data.labeled.report;
  ctx.log("dataset " + manifest.string() + ": train " + std::to_string(data.labeled.train.size()) + ", validation " +
          std::to_string(data.labeled.validation.size()) + ", test " + std::to_string(data.labeled.test.size()) +
          ", stage-1 " + std::to_string(data.one_class.train_healthy.size()) + "/" +
          std::to_string(data.one_class.test_healthy.size()) + "/" +
          std::to_string(data.one_class.test_damaged.size()) + ", unique offsets " +
          std::to_string(r.unique_source_offsets));
  for (const auto& w : r.warnings) ctx.err << "warning: " << w << "\n";
  if (export_segments > 0) {
    std::vector<spectro::SpectrogramSegment> segs;
    for (std::size_t i = 0; i < std::min(export_segments, data.labeled.test.size()); ++i) {
      segs.push_back(data.labeled.test.at(i));
    }
    if (!segs.empty()) spectro::save_segments(segs, base / "test_segments.seg");
  }
  return data;
}

DataBundle load_dataset(const Context& ctx, const fs::path& manifest) {
  require_exists(manifest, "--dataset");
  ctx.log("loading dataset " + manifest.string());
  return experiment::load_dataset_manifest(manifest);
}

diagnose::Pipeline load_bundle_or_empty(const fs::path& dir) {
  if (fs::exists(dir / "manifest.json")) return diagnose::load_pipeline(dir);
  return {};
}

json bundle_metadata(const RunConfig& cfg) {
  return {{"seed", cfg.seed}, {"config", experiment::to_json(cfg)}, {"vibdiag_version", kVersion}};
}

experiment::Stage1Outcome step_train_stage1(const Context& ctx, const DataBundle& data, const fs::path& model_dir) {
  diagnose::Pipeline p = load_bundle_or_empty(model_dir);
  const auto layout = data.one_class.train_healthy.layout();
  if (p.layout && !(*p.layout == layout)) {
    ctx.err << "warning: replacing a bundle built for a different segment layout\n";
    p = {};
  }
  const nnet::CnnModel<float>* stage2 = p.stage2 ? &*p.stage2 : nullptr;
  ctx.log("training stage 1 (" + std::string(diagnose::to_string(ctx.cfg.stage1.extractor)) + ", " +
          std::string(diagnose::to_string(ctx.cfg.stage1.channels)) + ") on " +
          std::to_string(data.one_class.train_healthy.size()) + " healthy segments");
  auto outcome = experiment::run_stage1(ctx.cfg, data, stage2);
  p.stage1 = outcome.model;
  p.layout = layout;
  p.metadata = bundle_metadata(ctx.cfg);
  diagnose::save_pipeline(p, model_dir);
  ctx.log("stage 1: precision " + pct(outcome.metrics.precision) + ", recall " + pct(outcome.metrics.recall) +
          " on held-out healthy/damaged segments; bundle " + model_dir.string());
  return outcome;
}

experiment::Stage2Outcome step_train_stage2(const Context& ctx, const DataBundle& data, const fs::path& model_dir,
                                            const fs::path& history_out) {
  diagnose::Pipeline p = load_bundle_or_empty(model_dir);
  const auto layout = data.labeled.train.layout();
  if (p.layout && !(*p.layout == layout)) {
    ctx.err << "warning: replacing a bundle built for a different segment layout\n";
    p = {};
  }
  ctx.log("training stage 2 on " + std::to_string(data.labeled.train.size()) + " instances, " +
          std::to_string(ctx.cfg.train.epochs) + " epochs, batch " + std::to_string(ctx.cfg.train.batch_size));
  auto outcome = experiment::run_stage2(ctx.cfg, data, [&](const nnet::EpochRecord& e) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "  epoch %zu: train loss %.5f, validation loss %.5f, validation subset accuracy %s",
                  e.epoch, e.train_loss, e.validation_loss, pct(e.validation_subset_accuracy).c_str());
    ctx.log(buf);
  });
  p.stage2 = outcome.result.model;
  p.layout = layout;
  p.metadata = bundle_metadata(ctx.cfg);
  diagnose::save_pipeline(p, model_dir);
  io::write_file_atomic(history_out, experiment::history_csv(outcome.result.history));
  std::string acc;
  for (std::size_t c = 0; c < kComponentCount; ++c) {
    acc += (c ? ", " : "") + std::string(to_string(kComponents[c])) + " " + pct(outcome.metrics.labels[c].accuracy);
  }
  ctx.log("stage 2 test accuracy: " + acc + "; subset " + pct(outcome.metrics.subset_accuracy));
  return outcome;
}

void step_detect(const Context& ctx, const DataBundle& data, const fs::path& model_dir, const fs::path& out) {
  require_exists(model_dir / "manifest.json", "--model-dir");
  auto p = diagnose::load_pipeline(model_dir);
  if (!p.stage1) throw DataError("'" + model_dir.string() + "': bundle has no stage-1 model (run train-stage1)");
  const auto outcome = experiment::score_stage1(std::move(*p.stage1), data);
  io::write_file_atomic(out, experiment::scores_csv(outcome));
  ctx.log("scores " + out.string() + ": precision " + pct(outcome.metrics.precision) + ", recall " +
          pct(outcome.metrics.recall));
}

void step_classify(const Context& ctx, const DataBundle& data, const fs::path& model_dir, const std::string& part,
                   const fs::path& out, const fs::path& truth_out) {
  require_exists(model_dir / "manifest.json", "--model-dir");
  const auto p = diagnose::load_pipeline(model_dir);
  if (!p.stage2) throw DataError("'" + model_dir.string() + "': bundle has no stage-2 model (run train-stage2)");
  const auto& set = experiment::partition(data, part);
  const auto diagnoses = diagnose::stage2_diagnose_set(*p.stage2, set);
  std::vector<spectro::Labels> truth;
  for (std::size_t i = 0; i < set.size(); ++i) truth.push_back(set.labels(i));
  io::write_file_atomic(out, experiment::predictions_csv(diagnoses));
  io::write_file_atomic(truth_out, experiment::truth_csv(truth));
  ctx.log("classified " + std::to_string(set.size()) + " " + part + " segments -> " + out.string());
}

struct Evaluation {
  std::optional<diagnose::LabelMetrics> stage1;
  std::optional<diagnose::Metrics> stage2;
};

Evaluation step_evaluate(const Context& ctx, const std::optional<fs::path>& predictions,
                         const std::optional<fs::path>& truth, const std::optional<fs::path>& scores,
                         const fs::path& out) {
  if (predictions.has_value() != truth.has_value()) {
    throw UsageError("--predictions and --truth must be given together");
  }
  if (!predictions && !scores) throw UsageError("nothing to evaluate: pass --predictions/--truth and/or --scores");
  Evaluation ev;
  if (scores) {
    require_exists(*scores, "--scores");
    const auto rows = render::parse_scores_csv(io::read_file(*scores), "'" + scores->string() + "'");
    std::vector<std::uint8_t> pred, gt;
    for (const auto& r : rows) {
      if (r.partition == experiment::kStage1Train) continue;
      pred.push_back(r.signed_score < 0.0);
      gt.push_back(r.partition == experiment::kStage1TestDamaged);
    }
    if (pred.empty()) throw DataError("'" + scores->string() + "': no test_healthy/test_damaged rows");
    ev.stage1 = diagnose::evaluate_binary(pred, gt);
  }
  if (predictions) {
    require_exists(*predictions, "--predictions");
    require_exists(*truth, "--truth");
    const auto p = experiment::parse_label_csv(io::read_file(*predictions), "'" + predictions->string() + "'", true);
    const auto t = experiment::parse_label_csv(io::read_file(*truth), "'" + truth->string() + "'", false);
    if (p.size() != t.size()) {
      throw DataError("length mismatch: " + std::to_string(p.size()) + " predictions in '" + predictions->string() +
                      "' vs " + std::to_string(t.size()) + " truth rows in '" + truth->string() + "'");
    }
    ev.stage2 = diagnose::evaluate(p, t);
  }
  const std::string csv = experiment::metrics_csv(ev.stage1 ? &*ev.stage1 : nullptr, ev.stage2 ? &*ev.stage2 : nullptr);
  io::write_file_atomic(out, csv);
  if (!ctx.quiet) ctx.out << csv;
  ctx.log("metrics " + out.string());
  return ev;
}

json evaluation_json(const Evaluation& ev) {
  json j = json::object();
  if (ev.stage1) j["stage1"] = diagnose::to_json(*ev.stage1);
  if (ev.stage2) j["stage2"] = diagnose::to_json(*ev.stage2);
  return j;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json versions() {
  return {{"vibdiag", kVersion}, {"compiler", __VERSION__}, {"cxx_standard", static_cast<long>(__cplusplus)}};
}

class Stopwatch {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

// ---- command line ------------------------------------------------------------

struct Options {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  bool quiet = false;

  // Shared by several subcommands; each subcommand registers what it uses.
  std::optional<std::string> out_dir, out, dataset, model_dir, signals, spectrograms, input, format;
  std::optional<std::string> predictions, truth, scores, partition, history_out, truth_out;
  std::optional<std::string> dimension;
  std::vector<std::string> values;
  std::optional<double> duration, segment_duration;
  std::optional<std::size_t> total, epochs, batch_size, index, filters, export_segments;
  std::optional<std::string> extractor, channel_mode, health, channel;
  std::optional<double> sample_rate;
  bool table_only = false;
  bool keep_signals = false;
};

fs::path pick(const std::optional<std::string>& v, const fs::path& fallback) {
  return v ? fs::path(*v) : fallback;
}

void apply_overrides(RunConfig& cfg, const Options& o) {
  if (o.seed) cfg.seed = *o.seed;
  if (o.deterministic) cfg.deterministic = true;
  if (o.segment_duration) cfg.dataset.segment_duration_s = *o.segment_duration;
  if (o.total) cfg.dataset.total = *o.total;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (o.batch_size) cfg.train.batch_size = *o.batch_size;
  if (o.filters) cfg.stage1.filters = *o.filters;
  try {
    if (o.extractor) cfg.stage1.extractor = diagnose::parse_extractor_mode(*o.extractor);
    if (o.channel_mode) cfg.stage1.channels = diagnose::parse_channel_mode(*o.channel_mode);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

int run_demo(Context& ctx, const Options& o) {
  const fs::path root = pick(o.out_dir, "demo-out");
  RunConfig& cfg = ctx.cfg;
  cfg.paths = {root / "data", root / "models", root / "reports"};
  experiment::validate(cfg);
  Stopwatch sw;
  json timing = json::object();
  ctx.log("demo: master seed " + std::to_string(cfg.seed) + ", output " + root.string());

  // generate
  std::shared_ptr<const spectro::SourcePools> pools;
  if (o.keep_signals) {
    const auto manifest = step_generate(ctx, cfg.paths.data_dir / "signals", siggen::SampleFormat::raw_f32_le,
                                        cfg.recording_s);
    pools = pools_from_signals(ctx, manifest);
  } else {
    ctx.log("generating " + std::to_string(cfg.recording_s) + " s recordings per component and health state");
    pools = experiment::synthesize(cfg);
  }
  timing["generate_s"] = sw.lap();
  const auto sources = step_save_spectrograms(ctx, *pools, cfg.paths.data_dir / "spectrograms");
  timing["spectrogram_s"] = sw.lap();

  // build-dataset
  const fs::path dataset_manifest = cfg.paths.data_dir / "dataset.json";
  const DataBundle data =
      step_build_dataset(ctx, pools, sources, dataset_manifest, o.export_segments.value_or(8));
  timing["build_dataset_s"] = sw.lap();

  // train-stage1 / train-stage2 (reuse mode needs the classifier first)
  const fs::path history = cfg.paths.report_dir / "history.csv";
  if (cfg.stage1.extractor == diagnose::ExtractorMode::reuse_stage2) {
    step_train_stage2(ctx, data, cfg.paths.model_dir, history);
    timing["train_stage2_s"] = sw.lap();
    step_train_stage1(ctx, data, cfg.paths.model_dir);
    timing["train_stage1_s"] = sw.lap();
  } else {
    step_train_stage1(ctx, data, cfg.paths.model_dir);
    timing["train_stage1_s"] = sw.lap();
    step_train_stage2(ctx, data, cfg.paths.model_dir, history);
    timing["train_stage2_s"] = sw.lap();
  }

  // detect + classify from the saved bundle, then evaluate the saved files
  const fs::path scores = cfg.paths.report_dir / "scores.csv";
  const fs::path predictions = cfg.paths.report_dir / "predictions.csv";
  const fs::path truth = cfg.paths.report_dir / "truth.csv";
  const fs::path metrics = cfg.paths.report_dir / "metrics.csv";
  step_detect(ctx, data, cfg.paths.model_dir, scores);
  step_classify(ctx, data, cfg.paths.model_dir, "test", predictions, truth);
  timing["inference_s"] = sw.lap();
  const Evaluation ev = step_evaluate(ctx, predictions, truth, scores, metrics);

  // figures
  const auto fig_scores = render::render_artifact(scores, cfg.paths.report_dir / "score_strip.svg");
  std::vector<fs::path> fig_segment;
  if (fs::exists(cfg.paths.data_dir / "test_segments.seg")) {
    fig_segment = render::render_artifact(cfg.paths.data_dir / "test_segments.seg",
                                          cfg.paths.report_dir / "segment.svg", 0);
  }
  timing["render_s"] = sw.lap();

  json artifacts = {{"dataset", dataset_manifest.string()},
                    {"model_dir", cfg.paths.model_dir.string()},
                    {"scores", scores.string()},
                    {"predictions", predictions.string()},
                    {"truth", truth.string()},
                    {"metrics", metrics.string()},
                    {"history", history.string()}};
  for (const auto& p : fig_scores) artifacts["figures"].push_back(p.string());
  for (const auto& p : fig_segment) artifacts["figures"].push_back(p.string());
  double total = 0.0;
  for (const auto& [k, v] : timing.items()) total += v.get<double>();
  timing["total_s"] = total;
  io::write_json_atomic(cfg.paths.report_dir / "report.json", {{"format", "vibdiag.report"},
                                                               {"version", 1},
                                                               {"command", "demo"},
                                                               {"started_utc", utc_now()},
                                                               {"config", experiment::to_json(cfg)},
                                                               {"metrics", evaluation_json(ev)},
                                                               {"artifacts", artifacts},
                                                               {"wall_clock", timing},
                                                               {"versions", versions()}});
  ctx.out << "stage 1 anomaly detection: precision " << pct(ev.stage1->precision) << ", recall "
          << pct(ev.stage1->recall) << "\n";
  ctx.out << "stage 2 test accuracy:";
  for (std::size_t c = 0; c < kComponentCount; ++c) {
    ctx.out << " " << to_string(kComponents[c]) << " " << pct(ev.stage2->labels[c].accuracy);
  }
  ctx.out << "\nreport " << (cfg.paths.report_dir / "report.json").string() << "\n";
  return 0;
}

int run_sweep(Context& ctx, const Options& o) {
  const auto dim = experiment::parse_sweep_dimension(*o.dimension);
  const fs::path dir = pick(o.out_dir, ctx.cfg.paths.report_dir / "sweep");
  if (o.values.size() < 2) throw UsageError("--values needs at least 2 entries");

  std::vector<experiment::ResolutionRow> table;
  if (dim == experiment::SweepDimension::window_s) {
    for (const auto& v : o.values) {
      const auto cfg = experiment::apply_sweep_value(ctx.cfg, dim, v);
      table.push_back(experiment::resolution(cfg.stft.window_s, cfg.stft.hop_s));
    }
  } else {
    table.push_back(experiment::resolution(ctx.cfg.stft.window_s, ctx.cfg.stft.hop_s));
  }
  const std::string res = experiment::resolution_csv(table);
  io::write_file_atomic(dir / "resolution.csv", res);
  if (!ctx.quiet) ctx.out << res;
  if (o.table_only) return 0;

  const auto rows = experiment::run_sweep(ctx.cfg, dim, o.values,
                                          [&](const std::string& v) { ctx.log("sweep " + *o.dimension + " = " + v); });
  const std::string csv = experiment::sweep_csv(dim, rows);
  io::write_file_atomic(dir / "sweep.csv", csv);
  io::write_json_atomic(dir / "sweep.json", {{"format", "vibdiag.sweep"},
                                             {"version", 1},
                                             {"dimension", *o.dimension},
                                             {"values", o.values},
                                             {"config", experiment::to_json(ctx.cfg)},
                                             {"versions", versions()}});
  if (!ctx.quiet) ctx.out << csv;
  return 0;
}

int dispatch(CLI::App& app, Context& ctx, const Options& o) {
  RunConfig& cfg = ctx.cfg;
  auto* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();

  if (name == "generate") {
    const fs::path dir = pick(o.out_dir, cfg.paths.data_dir / "signals");
    const auto format = o.format ? siggen::parse_sample_format(*o.format) : siggen::SampleFormat::raw_f32_le;
    const auto manifest = step_generate(ctx, dir, format, o.duration.value_or(cfg.recording_s));
    ctx.log("manifest " + manifest.string());
    return 0;
  }
  if (name == "spectrogram") {
    if (o.input) {
      require_exists(*o.input, "--input");
      if (!o.out) throw UsageError("--input needs --out");
      const auto format = o.format ? siggen::parse_sample_format(*o.format) : siggen::SampleFormat::raw_f32_le;
      auto ts = siggen::load_timeseries(*o.input, format, o.sample_rate.value_or(cfg.rig.sample_rate_hz),
                                        o.channel.value_or(""), parse_health(o.health.value_or("healthy")));
      spectro::save_spectrogram(spectro::stft(ts, cfg.stft), *o.out);
      ctx.log("wrote " + *o.out);
      return 0;
    }
    const fs::path manifest = pick(o.signals, cfg.paths.data_dir / "signals" / kSignalsManifest);
    require_exists(manifest, "--signals");
    const auto pools = pools_from_signals(ctx, manifest);
    step_save_spectrograms(ctx, *pools, pick(o.out_dir, cfg.paths.data_dir / "spectrograms"));
    return 0;
  }
  if (name == "build-dataset") {
    const fs::path manifest = pick(o.spectrograms, cfg.paths.data_dir / "spectrograms" / kSpectrogramsManifest);
    require_exists(manifest, "--spectrograms");
    auto [pools, paths] = load_spectrogram_manifest(manifest);
    cfg.stft = pools->config();
    cfg.rig.sample_rate_hz = pools->sample_rate_hz();
    step_build_dataset(ctx, pools, paths, pick(o.out, cfg.paths.data_dir / "dataset.json"), o.export_segments.value_or(8));
    return 0;
  }
  if (name == "train-stage1") {
    const auto data = load_dataset(ctx, pick(o.dataset, cfg.paths.data_dir / "dataset.json"));
    step_train_stage1(ctx, data, pick(o.model_dir, cfg.paths.model_dir));
    return 0;
  }
  if (name == "train-stage2") {
    const auto data = load_dataset(ctx, pick(o.dataset, cfg.paths.data_dir / "dataset.json"));
    step_train_stage2(ctx, data, pick(o.model_dir, cfg.paths.model_dir),
                      pick(o.history_out, cfg.paths.report_dir / "history.csv"));
    return 0;
  }
  if (name == "detect") {
    const fs::path model_dir = pick(o.model_dir, cfg.paths.model_dir);
    require_exists(model_dir / "manifest.json", "--model-dir");
    const auto data = load_dataset(ctx, pick(o.dataset, cfg.paths.data_dir / "dataset.json"));
    step_detect(ctx, data, model_dir, pick(o.out, cfg.paths.report_dir / "scores.csv"));
    return 0;
  }
  if (name == "classify") {
    const fs::path model_dir = pick(o.model_dir, cfg.paths.model_dir);
    require_exists(model_dir / "manifest.json", "--model-dir");
    const auto data = load_dataset(ctx, pick(o.dataset, cfg.paths.data_dir / "dataset.json"));
    step_classify(ctx, data, model_dir, o.partition.value_or("test"),
                  pick(o.out, cfg.paths.report_dir / "predictions.csv"),
                  pick(o.truth_out, cfg.paths.report_dir / "truth.csv"));
    return 0;
  }
  if (name == "evaluate") {
    auto opt_path = [](const std::optional<std::string>& s) {
      return s ? std::optional<fs::path>(*s) : std::nullopt;
    };
    step_evaluate(ctx, opt_path(o.predictions), opt_path(o.truth), opt_path(o.scores),
                  pick(o.out, cfg.paths.report_dir / "metrics.csv"));
    return 0;
  }
  if (name == "sweep") return run_sweep(ctx, o);
  if (name == "render") {
    const fs::path out(*o.out);
    if (out.extension() != ".svg") throw UsageError("--out must name an .svg file (the CSV goes next to it)");
    require_exists(*o.input, "--input");
    for (const auto& p : render::render_artifact(*o.input, out, o.index)) ctx.log("wrote " + p.string());
    return 0;
  }
  if (name == "demo") return run_demo(ctx, o);
  throw UsageError("unhandled subcommand '" + name + "'");
}

void build_app(CLI::App& app, Options& o) {
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.set_version_flag("--version", kVersion);
  app.add_option("--config", o.config, "JSON run configuration (default: $VIBDIAG_CONFIG)");
  app.add_option("--seed", o.seed, "Master seed; every random stream is derived from it");
  app.add_flag("--deterministic", o.deterministic, "Single-threaded numeric paths (always the case in this build)");
  app.add_flag("-q,--quiet", o.quiet, "Only print errors and final results");

  auto* gen = app.add_subcommand("generate", "Write synthetic healthy/damaged recordings for every component");
  gen->add_option("--out-dir", o.out_dir, "Output directory (default <data_dir>/signals)");
  gen->add_option("--duration", o.duration, "Recording length in seconds (default recording_s)");
  gen->add_option("--format", o.format, "csv | raw-f32-le (default raw-f32-le)");

  auto* spec = app.add_subcommand("spectrogram", "Compute STFT spectrogram archives");
  spec->add_option("--signals", o.signals, "Signals manifest (default <data_dir>/signals/signals.json)");
  spec->add_option("--out-dir", o.out_dir, "Output directory (default <data_dir>/spectrograms)");
  spec->add_option("--input", o.input, "Single recording instead of a manifest");
  spec->add_option("--out", o.out, "Archive path for --input");
  spec->add_option("--format", o.format, "Sample format of --input");
  spec->add_option("--sample-rate", o.sample_rate, "Sample rate of --input in Hz");
  spec->add_option("--channel", o.channel, "Channel name recorded in the archive");
  spec->add_option("--health", o.health, "healthy | damaged");

  auto* build = app.add_subcommand("build-dataset", "Sample labeled and one-class segment partitions");
  build->add_option("--spectrograms", o.spectrograms, "Spectrogram manifest (default <data_dir>/spectrograms/spectrograms.json)");
  build->add_option("--out", o.out, "Dataset manifest path (default <data_dir>/dataset.json)");
  build->add_option("--total", o.total, "Labeled instances over train/validation/test");
  build->add_option("--segment-duration", o.segment_duration, "Segment length in seconds");
  build->add_option("--export-segments", o.export_segments, "Test segments saved for rendering (default 8)");

  auto* t1 = app.add_subcommand("train-stage1", "Fit the healthy-only anomaly detector");
  t1->add_option("--dataset", o.dataset, "Dataset manifest");
  t1->add_option("--model-dir", o.model_dir, "Pipeline bundle directory");
  t1->add_option("--extractor", o.extractor, "random-filters | reuse-stage2");
  t1->add_option("--channel-mode", o.channel_mode, "joint | per-channel");
  t1->add_option("--filters", o.filters, "Random extractor filter count");

  auto* det = app.add_subcommand("detect", "Score the stage-1 partitions with a trained detector");
  det->add_option("--dataset", o.dataset, "Dataset manifest");
  det->add_option("--model-dir", o.model_dir, "Pipeline bundle directory");
  det->add_option("--out", o.out, "Score CSV (default <report_dir>/scores.csv)");

  auto* t2 = app.add_subcommand("train-stage2", "Train the multi-label fault classifier");
  t2->add_option("--dataset", o.dataset, "Dataset manifest");
  t2->add_option("--model-dir", o.model_dir, "Pipeline bundle directory");
  t2->add_option("--epochs", o.epochs, "Training epochs");
  t2->add_option("--batch-size", o.batch_size, "Mini-batch size");
  t2->add_option("--history-out", o.history_out, "Per-epoch CSV (default <report_dir>/history.csv)");

  auto* cls = app.add_subcommand("classify", "Predict fault labels for a dataset partition");
  cls->add_option("--dataset", o.dataset, "Dataset manifest");
  cls->add_option("--model-dir", o.model_dir, "Pipeline bundle directory");
  cls->add_option("--partition", o.partition, "train | validation | test (default test)");
  cls->add_option("--out", o.out, "Predictions CSV (default <report_dir>/predictions.csv)");
  cls->add_option("--truth-out", o.truth_out, "Ground-truth CSV (default <report_dir>/truth.csv)");

  auto* ev = app.add_subcommand("evaluate", "Compute metrics from prediction/truth files and/or a score file");
  ev->add_option("--predictions", o.predictions, "Predictions CSV");
  ev->add_option("--truth", o.truth, "Ground-truth CSV");
  ev->add_option("--scores", o.scores, "Stage-1 score CSV");
  ev->add_option("--out", o.out, "Metrics CSV (default <report_dir>/metrics.csv)");

  auto* sw = app.add_subcommand("sweep", "Re-run the pipeline across values of one setting");
  sw->add_option("--dimension", o.dimension,
                 "window_s | segment_duration_s | batch_size | log_amplitude | architecture")
      ->required();
  sw->add_option("--values", o.values, "Comma-separated values (fractions such as 1/60 allowed)")
      ->required()
      ->delimiter(',');
  sw->add_option("--out-dir", o.out_dir, "Output directory (default <report_dir>/sweep)");
  sw->add_flag("--table-only", o.table_only, "Only write the frequency/time resolution table");

  auto* ren = app.add_subcommand("render", "Draw a spectrogram, segment or score file as SVG + CSV");
  ren->add_option("--input", o.input, "Spectrogram archive, segment archive or score CSV")->required();
  ren->add_option("--out", o.out, "SVG path")->required();
  ren->add_option("--index", o.index, "Segment index within a segment archive");

  auto* demo = app.add_subcommand("demo", "Run the whole pipeline end to end");
  demo->add_option("--out-dir", o.out_dir, "Root for data/, models/ and reports/ (default demo-out)");
  demo->add_option("--total", o.total, "Labeled instances");
  demo->add_option("--epochs", o.epochs, "Training epochs");
  demo->add_option("--batch-size", o.batch_size, "Mini-batch size");
  demo->add_option("--segment-duration", o.segment_duration, "Segment length in seconds");
  demo->add_option("--extractor", o.extractor, "random-filters | reuse-stage2");
  demo->add_option("--channel-mode", o.channel_mode, "joint | per-channel");
  demo->add_flag("--keep-signals", o.keep_signals, "Also write the raw recordings to disk");
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

int fail(std::ostream& err, ErrorKind kind, const std::string& msg) {
  err << "error: " << to_string(kind) << ": " << one_line(msg) << "\n";
  return static_cast<int>(kind);
}

int run_impl(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-stage gearbox vibration diagnosis", "vibdiag"};
  Options o;
  build_app(app, o);
  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    // --help / --version
    if (dynamic_cast<const CLI::CallForVersion*>(&e)) {
      out << kVersion << "\n";
    } else {
      out << app.help();
    }
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << app.help();
    return fail(err, ErrorKind::usage, e.what());
  }

  try {
    Context ctx{load_config(o.config), out, err, o.quiet};
    apply_overrides(ctx.cfg, o);
    return dispatch(app, ctx, o);
  } catch (const Error& e) {
    return fail(err, e.kind(), e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(err, ErrorKind::data, e.what());
  } catch (const json::exception& e) {
    return fail(err, ErrorKind::data, e.what());
  } catch (const std::bad_alloc&) {
    return fail(err, ErrorKind::numeric, "out of memory");
  } catch (const std::exception& e) {
    return fail(err, ErrorKind::data, e.what());
  }
}

}  // namespace

int run(int argc, char** argv) { return run_impl(argc, argv, std::cout, std::cerr); }

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"vibdiag"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_impl(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace vibdiag::cli
