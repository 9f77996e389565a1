// SPDX-License-Identifier: Apache-2.0
//
// Run configuration and the end-to-end experiment steps shared by the CLI
// subcommands, the demo and the sweeps.
//
// Every random draw in a run descends from one master seed through
// derive_seed(master, tag) with these tags:
//
//   "signals"    synthetic recordings (then "signal/<component>/<health>")
//   "dataset"    labeled instance draw, shuffle and split
//   "one-class"  healthy-only training set and the stage-1 test sets
//   "stage1"     extractor filters and forest (see diagnose.hpp)
//   "stage2"     classifier initialisation, shuffling and dropout

#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "vibdiag/diagnose.hpp"
#include "vibdiag/iforest.hpp"
#include "vibdiag/nnet.hpp"
#include "vibdiag/siggen.hpp"
#include "vibdiag/spectro.hpp"

namespace vibdiag::experiment {

struct Paths {
  std::filesystem::path data_dir = "data";
  std::filesystem::path model_dir = "models";
  std::filesystem::path report_dir = "reports";
};

struct DatasetConfig {
  std::size_t total = 10000;  // 8000 / 1000 / 1000 at 8:1:1
  double segment_duration_s = 1.0;
  spectro::SplitRatios ratios;
  bool mix_channels = true;
  double damaged_fraction = 0.5;
};

struct Stage1Config {
  std::size_t train_healthy = 2000;
  std::size_t test_healthy = 250;
  std::size_t test_damaged = 250;
  diagnose::ExtractorMode extractor = diagnose::ExtractorMode::random_filters;
  diagnose::ChannelMode channels = diagnose::ChannelMode::joint;
  std::size_t filters = 16;
  iforest::ForestParams forest;  // seed field ignored: derived from the master seed
};

struct ClassifierConfig {
  std::size_t filters = 4;
  std::size_t hidden = 4;
  double dropout_rate = 0.10;
  nnet::Activation hidden_activation = nnet::Activation::linear;
};

struct RunConfig {
  std::uint64_t seed = 0;
  bool deterministic = false;
  Paths paths;
  siggen::RigProfile rig = siggen::default_rig();
  double recording_s = 30.0;  // length of each synthetic recording
  spectro::StftConfig stft;
  DatasetConfig dataset;
  Stage1Config stage1;
  nnet::TrainConfig train;    // seed field ignored: derived from the master seed
  ClassifierConfig classifier;
};

// Field-level ConfigError ("config.dataset.total: ...") for unknown keys,
// wrong types and invalid values. Missing keys keep the values of `base`.
RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {});
nlohmann::json to_json(const RunConfig& cfg);
// Cross-field checks: STFT against the rig sample rate, segment shape
// against the classifier, dataset sizes.
void validate(const RunConfig& cfg);

spectro::SegmentLayout expected_layout(const RunConfig& cfg);
nnet::Architecture classifier_architecture(const RunConfig& cfg, const spectro::SegmentLayout& layout);
nnet::TrainConfig train_config(const RunConfig& cfg);
diagnose::Stage1Options stage1_options(const RunConfig& cfg);

// All data a run needs: source spectrograms, labeled partitions and the
// one-class sets.
struct DataBundle {
  std::shared_ptr<const spectro::SourcePools> pools;
  spectro::LabeledDataset labeled;
  spectro::OneClassSets one_class;
};

std::shared_ptr<const spectro::SourcePools> synthesize(const RunConfig& cfg);
DataBundle assemble(const RunConfig& cfg, std::shared_ptr<const spectro::SourcePools> pools);

// Partition names used in dataset manifests and score files.
inline constexpr const char* kStage1Train = "train_healthy";
inline constexpr const char* kStage1TestHealthy = "test_healthy";
inline constexpr const char* kStage1TestDamaged = "test_damaged";

// Dataset manifest: source spectrogram archives (paths relative to the
// manifest) plus the instance lists of every partition.
void save_dataset_manifest(const DataBundle& data, const RunConfig& cfg,
                           const std::filesystem::path& manifest,
                           const std::array<std::array<std::string, 2>, kComponentCount>& sources);
DataBundle load_dataset_manifest(const std::filesystem::path& manifest);
const spectro::SegmentSet& partition(const DataBundle& data, std::string_view name);

struct Stage1Outcome {
  diagnose::Stage1Model model;
  std::vector<diagnose::Detection> train;
  std::vector<diagnose::Detection> test_healthy;
  std::vector<diagnose::Detection> test_damaged;
  diagnose::LabelMetrics metrics;  // positive class: anomalous
};

Stage1Outcome run_stage1(const RunConfig& cfg, const DataBundle& data,
                         const nnet::CnnModel<float>* stage2 = nullptr);
// Scores and metrics for an already trained model.
Stage1Outcome score_stage1(diagnose::Stage1Model model, const DataBundle& data);

struct Stage2Outcome {
  diagnose::Stage2Result result;
  std::vector<diagnose::Diagnosis> test;
  std::vector<spectro::Labels> truth;
  diagnose::Metrics metrics;
};

Stage2Outcome run_stage2(const RunConfig& cfg, const DataBundle& data,
                         const nnet::EpochCallback& on_epoch = {});

// ---- text artifacts --------------------------------------------------------

// partition,index,signed_score,s,mean_path_length,anomalous
std::string scores_csv(const Stage1Outcome& outcome);
// index,p_ring_gear,p_lss_bearing,p_hss_bearing,ring_gear,lss_bearing,hss_bearing
std::string predictions_csv(std::span<const diagnose::Diagnosis> diagnoses);
// index,ring_gear,lss_bearing,hss_bearing
std::string truth_csv(std::span<const spectro::Labels> truth);
std::vector<spectro::Labels> parse_label_csv(const std::string& text, const std::string& what,
                                             bool predictions);
// Stage-1 row (when given) followed by per-label and subset rows.
std::string metrics_csv(const diagnose::LabelMetrics* stage1, const diagnose::Metrics* stage2);
std::string history_csv(const nnet::TrainHistory& history);

// ---- sweeps ----------------------------------------------------------------

enum class SweepDimension { window_s, segment_duration_s, batch_size, log_amplitude, architecture };

SweepDimension parse_sweep_dimension(std::string_view s);
std::string_view to_string(SweepDimension d);

// Accepts reals and fractions ("1/60") for the time dimensions,
// on/off/true/false for log_amplitude and 4-filter/16-filter (or 4/16) for
// the stage-1 extractor architecture.
RunConfig apply_sweep_value(RunConfig base, SweepDimension dim, std::string_view value);

struct ResolutionRow {
  double window_s = 0.0;
  double bin_spacing_hz = 0.0;          // fs / (window_s * fs)
  double frames_per_minute = 0.0;       // independent (non-overlapping) windows
  double hop_frames_per_second = 0.0;   // at the configured hop
};

ResolutionRow resolution(double window_s, double hop_s);
std::string resolution_csv(std::span<const ResolutionRow> rows);

struct SweepRow {
  std::string value;
  ResolutionRow resolution;
  std::size_t segment_frames = 0;
  std::size_t segment_bins = 0;
  diagnose::LabelMetrics stage1;
  diagnose::Metrics stage2;
};

// Validates every value before running anything.
std::vector<SweepRow> run_sweep(const RunConfig& base, SweepDimension dim,
                                const std::vector<std::string>& values,
                                const std::function<void(const std::string&)>& progress = {});
std::string sweep_csv(SweepDimension dim, std::span<const SweepRow> rows);

}  // namespace vibdiag::experiment
