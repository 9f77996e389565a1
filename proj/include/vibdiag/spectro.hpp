// SPDX-License-Identifier: Apache-2.0
//
// Data preparation: band-limited STFT spectrograms, fixed-duration segment
// sampling, channel stacking and shuffled train/validation/test assembly.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vibdiag/common.hpp"
#include "vibdiag/siggen.hpp"

namespace vibdiag::spectro {

enum class WindowFn { hann, rectangular };

std::string_view to_string(WindowFn w);
WindowFn parse_window_fn(std::string_view s);

struct StftConfig {
  double window_s = 0.25;
  double hop_s = 0.05;
  WindowFn window_fn = WindowFn::hann;
  double fmax_hz = 1000.0;
  bool log_amplitude = true;
  double log_epsilon = 1e-12;

  bool operator==(const StftConfig&) const = default;
};

nlohmann::json to_json(const StftConfig& cfg);
// Missing keys keep the values of `base`; unknown keys are rejected.
StftConfig stft_config_from_json(const nlohmann::json& j, StftConfig base = {});

// Throws ConfigError for invalid fields or window/hop lengths that are not a
// whole number of samples at `sample_rate_hz`.
void validate(const StftConfig& cfg, double sample_rate_hz);
std::size_t window_samples(const StftConfig& cfg, double sample_rate_hz);
std::size_t hop_samples(const StftConfig& cfg, double sample_rate_hz);
// Bins 0..K with K * fs / N <= fmax.
std::size_t retained_bins(const StftConfig& cfg, double sample_rate_hz);
double bin_spacing_hz(const StftConfig& cfg, double sample_rate_hz);
// Frames whose window lies fully inside a segment of `duration_s`.
std::size_t frames_per_segment(const StftConfig& cfg, double duration_s);

struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<double> magnitudes;  // frame-major
  std::vector<double> frame_times_s;  // frame start times
  std::vector<double> bin_freqs_hz;
  StftConfig config;
  double sample_rate_hz = 0.0;
  std::string channel;
  Health health = Health::healthy;
  std::uint64_t seed = 0;

  double at(std::size_t frame, std::size_t bin) const { return magnitudes[frame * bins + bin]; }
  std::span<const double> frame(std::size_t f) const {
    return {magnitudes.data() + f * bins, bins};
  }
};

// Frame f covers samples [f*hop, f*hop + window). Magnitudes are |DFT| of the
// windowed frame, optionally mapped through log10(m + log_epsilon).
Spectrogram stft(const siggen::TimeSeries& ts, const StftConfig& cfg);

// Everything a consumer needs to know to accept a segment: it must match the
// layout the model was trained on.
struct SegmentLayout {
  StftConfig stft;
  double sample_rate_hz = 0.0;
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::size_t channels = 0;

  bool operator==(const SegmentLayout&) const = default;
  double duration_s() const;
  std::string fingerprint() const;
};

nlohmann::json to_json(const SegmentLayout& layout);
SegmentLayout segment_layout_from_json(const nlohmann::json& j);

using Labels = std::array<std::uint8_t, kComponentCount>;

struct SpectrogramSegment {
  SegmentLayout layout;
  std::vector<float> magnitudes;  // frame-major, then bin, then channel
  std::optional<Labels> labels;
  std::vector<std::size_t> source_offsets;  // first frame index, per channel
  std::vector<std::string> channels;
  std::vector<Health> health;

  float at(std::size_t frame, std::size_t bin, std::size_t channel) const {
    return magnitudes[(frame * layout.bins + bin) * layout.channels + channel];
  }
};

// Single-channel slice of frames [offset, offset + frames).
SpectrogramSegment extract_segment(const Spectrogram& spec, std::size_t offset, std::size_t frames);

// Draws `count` frame-aligned start offsets uniformly with replacement.
std::vector<SpectrogramSegment> sample_segments(const Spectrogram& spec, double duration_s,
                                                std::size_t count, std::uint64_t seed);

// Stacks one single-channel segment per component (ring gear, LSS bearing, HSS
// bearing). Label j is the health of channel j; passing `labels` checks them.
SpectrogramSegment stack_channels(std::span<const SpectrogramSegment> per_component,
                                  std::optional<Labels> labels = std::nullopt);

// Spectrogram per (component, health) for one recording session.
class SourcePools {
 public:
  void set(Component c, Health h, std::shared_ptr<const Spectrogram> spec);
  const Spectrogram& at(Component c, Health h) const;
  bool has(Component c, Health h) const;
  // Throws unless every present spectrogram shares sample rate and config.
  void validate() const;
  const StftConfig& config() const;
  double sample_rate_hz() const;
  // Largest frame count usable by aligned offsets across all sources.
  std::size_t common_frames() const;

 private:
  std::array<std::array<std::shared_ptr<const Spectrogram>, 2>, kComponentCount> grid_{};
};

// A dataset instance: one aligned start offset shared by the three channels,
// each channel drawn from the healthy or damaged recording per its label.
struct Instance {
  Labels labels{};
  std::size_t offset = 0;

  bool operator==(const Instance&) const = default;
};

// Lazily materialised collection of stacked segments. Either references
// source pools plus instances, or owns already materialised segments.
class SegmentSet {
 public:
  SegmentSet() = default;
  SegmentSet(std::shared_ptr<const SourcePools> pools, std::size_t frames,
             std::vector<Instance> instances);
  explicit SegmentSet(std::vector<SpectrogramSegment> segments);

  std::size_t size() const;
  bool empty() const { return size() == 0; }
  SpectrogramSegment at(std::size_t i) const;
  Labels labels(std::size_t i) const;
  const std::vector<Instance>& instances() const { return instances_; }
  std::size_t segment_frames() const { return frames_; }
  const std::shared_ptr<const SourcePools>& pools() const { return pools_; }
  SegmentLayout layout() const;

 private:
  std::shared_ptr<const SourcePools> pools_;
  std::size_t frames_ = 0;
  std::vector<Instance> instances_;
  std::shared_ptr<const std::vector<SpectrogramSegment>> owned_;
};

struct SplitRatios {
  double train = 8.0;
  double validation = 1.0;
  double test = 1.0;
};

struct DatasetOptions {
  double segment_duration_s = 1.0;
  SplitRatios ratios;
  // Independent per-channel health draws; otherwise whole-gearbox labels.
  bool mix_channels = true;
  // Requested fraction of damaged labels per component.
  double damaged_fraction = 0.5;
};

struct BuildReport {
  std::size_t unique_source_offsets = 0;
  std::array<double, kComponentCount> damaged_marginals{};
  std::vector<std::string> warnings;
};

struct LabeledDataset {
  SegmentSet train;
  SegmentSet validation;
  SegmentSet test;
  SplitRatios ratios;
  double segment_duration_s = 1.0;
  std::uint64_t seed = 0;
  BuildReport report;
};

// Partition sizes: train = round(total * r_train / sum), validation likewise,
// test takes the remainder.
std::array<std::size_t, 3> split_sizes(std::size_t total, const SplitRatios& ratios);

LabeledDataset assemble_dataset(std::shared_ptr<const SourcePools> pools,
                                const DatasetOptions& options, std::size_t total,
                                std::uint64_t seed);

// Healthy-only training set plus healthy and damaged-gearbox test sets for
// the one-class stage.
struct OneClassSets {
  SegmentSet train_healthy;
  SegmentSet test_healthy;
  SegmentSet test_damaged;
};

OneClassSets assemble_one_class_sets(std::shared_ptr<const SourcePools> pools,
                                     double segment_duration_s, std::size_t train_healthy,
                                     std::size_t test_healthy, std::size_t test_damaged,
                                     std::uint64_t seed);

// Archive containers (see io.hpp for the framing). Magnitudes are stored as
// float32, the precision segments carry.
void save_spectrogram(const Spectrogram& spec, const std::filesystem::path& path);
Spectrogram load_spectrogram(const std::filesystem::path& path);

void save_segments(std::span<const SpectrogramSegment> segments, const std::filesystem::path& path);
std::vector<SpectrogramSegment> load_segments(const std::filesystem::path& path);

}  // namespace vibdiag::spectro
