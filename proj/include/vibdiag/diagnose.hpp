// SPDX-License-Identifier: Apache-2.0
//
// Two-stage gearbox diagnosis.
//
// Stage 1 learns what healthy spectrograms look like: a convolutional front
// end turns each segment into a feature vector and an isolation forest fitted
// on healthy features flags anything that does not fit. Stage 2 is a
// supervised multi-label classifier that names the damaged component(s).

#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vibdiag/iforest.hpp"
#include "vibdiag/nnet.hpp"
#include "vibdiag/siggen.hpp"
#include "vibdiag/spectro.hpp"

namespace vibdiag::diagnose {

// One healthy and one damaged synthetic recording of `duration_s` per
// component, transformed with `cfg`. Signal seeds are derived from `seed`
// with the tag "signal/<component>/<health>".
std::shared_ptr<spectro::SourcePools> synthesize_pools(const siggen::RigProfile& rig,
                                                       const spectro::StftConfig& cfg,
                                                       double duration_s, std::uint64_t seed);

// How the stage-1 front end gets its weights.
enum class ExtractorMode {
  random_filters,  // seeded random filters, batchnorm statistics fitted on healthy data
  reuse_stage2,    // conv/pool/batchnorm of a trained stage-2 classifier
};

// One forest over the stacked channels, or one per accelerometer channel.
enum class ChannelMode { joint, per_channel };

std::string_view to_string(ExtractorMode m);
ExtractorMode parse_extractor_mode(std::string_view s);
std::string_view to_string(ChannelMode m);
ChannelMode parse_channel_mode(std::string_view s);

struct Stage1Options {
  ExtractorMode extractor = ExtractorMode::random_filters;
  ChannelMode channels = ChannelMode::joint;
  std::size_t filters = 16;  // random-filter mode only
  iforest::ForestParams forest;
  std::uint64_t seed = 0;    // derives the extractor and forest seeds
};

struct Stage1Model {
  ExtractorMode extractor_mode = ExtractorMode::random_filters;
  ChannelMode channel_mode = ChannelMode::joint;
  spectro::SegmentLayout layout;
  std::string fingerprint;
  // One entry for joint mode, one per channel otherwise.
  std::vector<nnet::CnnModel<float>> extractors;
  std::vector<iforest::IsolationForest> forests;
};

// Single-channel view of channel `c` of a stacked segment.
spectro::SpectrogramSegment select_channel(const spectro::SpectrogramSegment& seg, std::size_t c);

// Throws DataError if any segment carries a damaged label. `stage2` is
// required for ExtractorMode::reuse_stage2 and ignored otherwise.
Stage1Model stage1_train(const spectro::SegmentSet& healthy, const Stage1Options& options,
                         const nnet::CnnModel<float>* stage2 = nullptr);

struct Detection {
  double signed_score = 0.0;      // minimum over channel forests in per-channel mode
  double s = 0.0;
  double mean_path_length = 0.0;
  bool is_anomalous = false;      // signed_score < 0
};

// Throws DataError when the segment's preprocessing fingerprint differs from
// the one the model was trained on.
Detection stage1_detect(const Stage1Model& model, const spectro::SpectrogramSegment& segment);
std::vector<Detection> stage1_detect_set(const Stage1Model& model, const spectro::SegmentSet& set);

struct Stage2Result {
  nnet::CnnModel<float> model;
  nnet::TrainHistory history;
};

// Requires both classes in every label column of the training partition.
Stage2Result stage2_train(const spectro::LabeledDataset& dataset, const nnet::TrainConfig& cfg,
                          const nnet::Architecture& arch,
                          const nnet::EpochCallback& on_epoch = {});

inline constexpr float kVerdictThreshold = 0.5f;

struct Diagnosis {
  std::array<float, kComponentCount> probabilities{};
  spectro::Labels verdicts{};
  std::optional<double> anomaly_score;
  std::string segment_id;
};

Diagnosis make_diagnosis(std::span<const float> probabilities);
Diagnosis stage2_diagnose(const nnet::CnnModel<float>& model, const spectro::SpectrogramSegment& segment);
std::vector<Diagnosis> stage2_diagnose_set(const nnet::CnnModel<float>& model,
                                           const spectro::SegmentSet& set);

struct LabelMetrics {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double accuracy = 0.0;
};

// Confusion counts -> rates. A zero precision/recall denominator yields 1
// when there are no false negatives and 0 otherwise.
LabelMetrics finalize(LabelMetrics counts);

struct Metrics {
  std::array<LabelMetrics, kComponentCount> labels{};
  double subset_accuracy = 0.0;
  std::size_t count = 0;
};

Metrics evaluate(std::span<const spectro::Labels> predicted, std::span<const spectro::Labels> truth);
Metrics evaluate(std::span<const Diagnosis> diagnoses, std::span<const spectro::Labels> truth);
// Binary metrics with "anomalous" as the positive class.
LabelMetrics evaluate_binary(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth);

// CSV rows: label,tp,fp,tn,fn,precision,recall,accuracy (fixed 6-decimal
// formatting so repeated runs compare byte for byte).
std::string metrics_csv_header();
std::string metrics_csv_row(std::string_view name, const LabelMetrics& m);
nlohmann::json to_json(const LabelMetrics& m);
nlohmann::json to_json(const Metrics& m);

// ---- bundle ---------------------------------------------------------------

inline constexpr int kPipelineVersion = 1;

struct Pipeline {
  std::optional<Stage1Model> stage1;
  std::optional<nnet::CnnModel<float>> stage2;
  std::optional<spectro::SegmentLayout> layout;
  nlohmann::json metadata = nlohmann::json::object();
};

// Directory with manifest.json plus one payload per model. Every payload is
// written atomically before the manifest, which records CRC-32 checksums.
void save_pipeline(const Pipeline& pipeline, const std::filesystem::path& dir);
Pipeline load_pipeline(const std::filesystem::path& dir);

}  // namespace vibdiag::diagnose
