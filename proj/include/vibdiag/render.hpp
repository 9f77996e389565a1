// SPDX-License-Identifier: Apache-2.0
//
// Static report graphics: spectrogram heatmaps and anomaly-score strip plots
// as standalone SVG, each accompanied by a CSV of the plotted values.

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vibdiag/spectro.hpp"

namespace vibdiag::render {

// One time x frequency panel. values is frame-major (row = time step).
struct HeatmapPanel {
  std::string title;
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<double> values;
};

struct Heatmap {
  std::vector<HeatmapPanel> panels;
  double frame_step_s = 0.0;   // time between consecutive rows
  double bin_spacing_hz = 0.0;
  double fmax_hz = 0.0;
  std::string value_label;
};

// Long spectrograms are block-averaged in time down to `max_frames` rows.
Heatmap heatmap_of(const spectro::Spectrogram& spec, std::size_t max_frames = 300);
// One panel per channel.
Heatmap heatmap_of(const spectro::SpectrogramSegment& seg);

std::string heatmap_svg(const Heatmap& h);
// panel,time_s,freq_hz,value
std::string heatmap_csv(const Heatmap& h);

struct ScoreRow {
  std::string partition;
  std::size_t index = 0;
  double signed_score = 0.0;
  double s = 0.0;
  double mean_path_length = 0.0;
  bool anomalous = false;
};

// Parses the partition,index,signed_score,s,mean_path_length,anomalous
// format. Throws DataError for a file without rows.
std::vector<ScoreRow> parse_scores_csv(const std::string& text, const std::string& what);

// Panels in train_healthy, test_healthy, test_damaged order.
std::string score_strip_svg(std::span<const ScoreRow> rows);
// panel,index,signed_score
std::string score_strip_csv(std::span<const ScoreRow> rows);

enum class ArtifactKind { spectrogram, segments, scores };

// Sniffs the file: container header format or score CSV header. Anything
// else is a DataError naming the file.
ArtifactKind detect_artifact(const std::filesystem::path& path);

// Writes `out` (SVG) and the same path with a .csv extension. For segment
// archives `index` picks the segment (default 0). Returns the written paths.
std::vector<std::filesystem::path> render_artifact(const std::filesystem::path& input,
                                                   const std::filesystem::path& out,
                                                   std::optional<std::size_t> index = std::nullopt);

}  // namespace vibdiag::render
