// SPDX-License-Identifier: Apache-2.0

#include "vibdiag/render.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "vibdiag/io.hpp"

namespace vibdiag::render {

namespace {

constexpr double kPanelW = 640.0;
constexpr double kPanelH = 260.0;
constexpr double kMarginL = 70.0;
constexpr double kMarginR = 90.0;
constexpr double kMarginT = 36.0;
constexpr double kMarginB = 46.0;

std::string num(double v, const char* spec = "%.6g") {
  char buf[48];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Viridis-like ramp through five anchors.
std::string color(double t) {
  static constexpr std::array<std::array<double, 3>, 5> anchors = {{
      {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}}};
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0) * 4.0;
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(t), 3);
  const double f = t - static_cast<double>(i);
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x",
                static_cast<int>(std::lround(anchors[i][0] + f * (anchors[i + 1][0] - anchors[i][0]))),
                static_cast<int>(std::lround(anchors[i][1] + f * (anchors[i + 1][1] - anchors[i][1]))),
                static_cast<int>(std::lround(anchors[i][2] + f * (anchors[i + 1][2] - anchors[i][2]))));
  return buf;
}

std::vector<double> nice_ticks(double lo, double hi, int target = 5) {
  if (!(hi > lo)) return {lo};
  const double raw = (hi - lo) / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 2.5, 5.0, 10.0}) {
    if (m * mag >= raw) {
      step = m * mag;
      break;
    }
  }
  std::vector<double> out;
  for (double v = std::ceil(lo / step) * step; v <= hi + step * 1e-9; v += step) {
    out.push_back(std::abs(v) < step * 1e-9 ? 0.0 : v);
  }
  return out;
}

std::string svg_open(double w, double h) {
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) +
         "\" height=\"" + num(h) + "\" viewBox=\"0 0 " + num(w) + " " + num(h) +
         "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

std::string text(double x, double y, const std::string& s, const char* anchor = "middle", const std::string& extra = "") {
  return "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" text-anchor=\"" + anchor + "\"" + extra + ">" +
         escape(s) + "</text>\n";
}

std::string line(double x1, double y1, double x2, double y2, const char* stroke = "black", const char* extra = "") {
  return "<line x1=\"" + num(x1) + "\" y1=\"" + num(y1) + "\" x2=\"" + num(x2) + "\" y2=\"" + num(y2) +
         "\" stroke=\"" + stroke + "\"" + extra + "/>\n";
}

const std::array<const char*, 3> kScorePanels = {"train_healthy", "test_healthy", "test_damaged"};
const std::array<const char*, 3> kScoreTitles = {"Training (healthy)", "Test (healthy)", "Test (damaged)"};

}  // namespace

Heatmap heatmap_of(const spectro::Spectrogram& spec, std::size_t max_frames) {
  if (spec.frames == 0 || spec.bins == 0) throw DataError("heatmap: empty spectrogram");
  max_frames = std::max<std::size_t>(max_frames, 1);
  const std::size_t block = (spec.frames + max_frames - 1) / max_frames;
  HeatmapPanel p;
  p.title = spec.channel.empty() ? std::string("spectrogram") : spec.channel + " (" + std::string(to_string(spec.health)) + ")";
  p.frames = (spec.frames + block - 1) / block;
  p.bins = spec.bins;
  p.values.assign(p.frames * p.bins, 0.0);
  for (std::size_t r = 0; r < p.frames; ++r) {
    const std::size_t f0 = r * block;
    const std::size_t f1 = std::min(spec.frames, f0 + block);
    for (std::size_t k = 0; k < spec.bins; ++k) {
      double acc = 0.0;
      for (std::size_t f = f0; f < f1; ++f) acc += spec.at(f, k);
      p.values[r * p.bins + k] = acc / static_cast<double>(f1 - f0);
    }
  }
  Heatmap h;
  h.panels.push_back(std::move(p));
  h.frame_step_s = spec.config.hop_s * static_cast<double>(block);
  h.bin_spacing_hz = spectro::bin_spacing_hz(spec.config, spec.sample_rate_hz);
  h.fmax_hz = static_cast<double>(spec.bins - 1) * h.bin_spacing_hz;
  h.value_label = spec.config.log_amplitude ? "log10 amplitude" : "amplitude";
  return h;
}

Heatmap heatmap_of(const spectro::SpectrogramSegment& seg) {
  const auto& l = seg.layout;
  if (l.frames == 0 || l.bins == 0 || l.channels == 0) throw DataError("heatmap: empty segment");
  Heatmap h;
  for (std::size_t c = 0; c < l.channels; ++c) {
    HeatmapPanel p;
    p.title = c < seg.channels.size() ? seg.channels[c] : "channel " + std::to_string(c);
    if (c < seg.health.size()) p.title += " (" + std::string(to_string(seg.health[c])) + ")";
    p.frames = l.frames;
    p.bins = l.bins;
    p.values.resize(l.frames * l.bins);
    for (std::size_t f = 0; f < l.frames; ++f) {
      for (std::size_t k = 0; k < l.bins; ++k) p.values[f * l.bins + k] = seg.at(f, k, c);
    }
    h.panels.push_back(std::move(p));
  }
  h.frame_step_s = l.stft.hop_s;
  h.bin_spacing_hz = spectro::bin_spacing_hz(l.stft, l.sample_rate_hz);
  h.fmax_hz = static_cast<double>(l.bins - 1) * h.bin_spacing_hz;
  h.value_label = l.stft.log_amplitude ? "log10 amplitude" : "amplitude";
  return h;
}

std::string heatmap_svg(const Heatmap& h) {
  if (h.panels.empty()) throw DataError("heatmap: nothing to draw");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& p : h.panels) {
    for (double v : p.values) {
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  if (!std::isfinite(lo)) lo = hi = 0.0;
  const double span = hi > lo ? hi - lo : 1.0;

  const double cell_h = kPanelH + kMarginT + kMarginB;
  const double width = kMarginL + kPanelW + kMarginR;
  std::string svg = svg_open(width, cell_h * static_cast<double>(h.panels.size()));
  for (std::size_t pi = 0; pi < h.panels.size(); ++pi) {
    const auto& p = h.panels[pi];
    const double top = cell_h * static_cast<double>(pi) + kMarginT;
    const double t_end = h.frame_step_s * static_cast<double>(p.frames);
    const double f_end = h.bin_spacing_hz * static_cast<double>(p.bins);
    const double cw = kPanelW / static_cast<double>(p.frames);
    const double ch = kPanelH / static_cast<double>(p.bins);
    svg += text(kMarginL + kPanelW / 2, top - 12, p.title, "middle", " font-weight=\"bold\"");
    svg += "<g shape-rendering=\"crispEdges\">\n";
    for (std::size_t f = 0; f < p.frames; ++f) {
      for (std::size_t k = 0; k < p.bins; ++k) {
        // Low frequencies at the bottom.
        const double y = top + kPanelH - static_cast<double>(k + 1) * ch;
        svg += "<rect x=\"" + num(kMarginL + static_cast<double>(f) * cw, "%.2f") + "\" y=\"" + num(y, "%.2f") +
               "\" width=\"" + num(cw + 0.05, "%.2f") + "\" height=\"" + num(ch + 0.05, "%.2f") + "\" fill=\"" +
               color((p.values[f * p.bins + k] - lo) / span) + "\"/>\n";
      }
    }
    svg += "</g>\n";
    svg += "<rect x=\"" + num(kMarginL) + "\" y=\"" + num(top) + "\" width=\"" + num(kPanelW) + "\" height=\"" +
           num(kPanelH) + "\" fill=\"none\" stroke=\"black\"/>\n";
    for (double t : nice_ticks(0.0, t_end)) {
      const double x = kMarginL + t / t_end * kPanelW;
      svg += line(x, top + kPanelH, x, top + kPanelH + 5);
      svg += text(x, top + kPanelH + 18, num(t, "%g"));
    }
    svg += text(kMarginL + kPanelW / 2, top + kPanelH + 36, "Time (s)");
    for (double f : nice_ticks(0.0, std::min(f_end, h.fmax_hz + h.bin_spacing_hz))) {
      const double y = top + kPanelH - f / f_end * kPanelH;
      svg += line(kMarginL - 5, y, kMarginL, y);
      svg += text(kMarginL - 8, y + 4, num(f, "%g"), "end");
    }
    const double ym = top + kPanelH / 2;
    svg += text(18, ym, "Frequency (Hz)", "middle", " transform=\"rotate(-90 18 " + num(ym) + ")\"");
  }
  // Colour bar.
  const double bx = kMarginL + kPanelW + 30;
  const double by = kMarginT;
  for (int i = 0; i < 64; ++i) {
    svg += "<rect x=\"" + num(bx) + "\" y=\"" + num(by + kPanelH - (i + 1) * kPanelH / 64, "%.2f") +
           "\" width=\"14\" height=\"" + num(kPanelH / 64 + 0.05, "%.2f") + "\" fill=\"" + color((i + 0.5) / 64) +
           "\"/>\n";
  }
  svg += text(bx + 18, by + 10, num(hi, "%.3g"), "start");
  svg += text(bx + 18, by + kPanelH, num(lo, "%.3g"), "start");
  svg += text(bx + 7, by - 6, h.value_label, "middle", " font-size=\"10\"");
  svg += "</svg>\n";
  return svg;
}

std::string heatmap_csv(const Heatmap& h) {
  std::string out = "panel,time_s,freq_hz,value\n";
  for (const auto& p : h.panels) {
    for (std::size_t f = 0; f < p.frames; ++f) {
      const std::string t = num(h.frame_step_s * static_cast<double>(f), "%.9g");
      for (std::size_t k = 0; k < p.bins; ++k) {
        out += p.title + "," + t + "," + num(h.bin_spacing_hz * static_cast<double>(k), "%.9g") + "," +
               num(p.values[f * p.bins + k], "%.9g") + "\n";
      }
    }
  }
  return out;
}

std::vector<ScoreRow> parse_scores_csv(const std::string& body, const std::string& what) {
  std::istringstream in(body);
  std::string line_text;
  if (!std::getline(in, line_text) || line_text.rfind("partition,index,signed_score", 0) != 0) {
    throw DataError(what + ": not a score file (expected a partition,index,signed_score,... header)");
  }
  std::vector<ScoreRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line_text)) {
    ++lineno;
    if (line_text.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line_text);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) throw DataError(what + ":" + std::to_string(lineno) + ": expected 6 columns");
    ScoreRow r;
    try {
      r.partition = cells[0];
      r.index = std::stoull(cells[1]);
      r.signed_score = std::stod(cells[2]);
      r.s = std::stod(cells[3]);
      r.mean_path_length = std::stod(cells[4]);
      r.anomalous = cells[5] == "1";
    } catch (const std::exception&) {
      throw DataError(what + ":" + std::to_string(lineno) + ": malformed number");
    }
    if (std::find(kScorePanels.begin(), kScorePanels.end(), r.partition) == kScorePanels.end()) {
      throw DataError(what + ":" + std::to_string(lineno) + ": unknown partition '" + r.partition + "'");
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw DataError(what + ": score file has no rows");
  return rows;
}

std::string score_strip_svg(std::span<const ScoreRow> rows) {
  if (rows.empty()) throw DataError("score plot: no scores");
  double lo = 0.0, hi = 0.0;
  for (const auto& r : rows) {
    lo = std::min(lo, r.signed_score);
    hi = std::max(hi, r.signed_score);
  }
  const double pad = 0.05 * std::max(hi - lo, 1e-6);
  lo -= pad;
  hi += pad;
  const double pw = 300.0, ph = 320.0, gap = 30.0;
  const double width = kMarginL + 3 * pw + 2 * gap + 20;
  const double height = kMarginT + ph + kMarginB + 10;
  auto ymap = [&](double v) { return kMarginT + (hi - v) / (hi - lo) * ph; };

  std::string svg = svg_open(width, height);
  for (std::size_t pi = 0; pi < kScorePanels.size(); ++pi) {
    const double left = kMarginL + static_cast<double>(pi) * (pw + gap);
    std::vector<const ScoreRow*> mine;
    for (const auto& r : rows) {
      if (r.partition == kScorePanels[pi]) mine.push_back(&r);
    }
    svg += text(left + pw / 2, kMarginT - 12, std::string(kScoreTitles[pi]) + " n=" + std::to_string(mine.size()),
                "middle", " font-weight=\"bold\"");
    svg += "<rect x=\"" + num(left) + "\" y=\"" + num(kMarginT) + "\" width=\"" + num(pw) + "\" height=\"" + num(ph) +
           "\" fill=\"none\" stroke=\"black\"/>\n";
    svg += line(left, ymap(0.0), left + pw, ymap(0.0), "gray", " stroke-dasharray=\"4 3\"");
    const double n = static_cast<double>(std::max<std::size_t>(mine.size(), 1));
    for (std::size_t i = 0; i < mine.size(); ++i) {
      const double x = left + (static_cast<double>(i) + 0.5) / n * pw;
      const bool neg = mine[i]->signed_score < 0.0;
      svg += "<circle cx=\"" + num(x, "%.2f") + "\" cy=\"" + num(ymap(mine[i]->signed_score), "%.2f") +
             "\" r=\"1.6\" fill=\"" + (neg ? "#d62728" : "#1f77b4") + "\"/>\n";
    }
    if (mine.empty()) svg += text(left + pw / 2, kMarginT + ph / 2, "no scores");
    svg += text(left + pw / 2, kMarginT + ph + 20, "Segment");
    if (pi == 0) {
      for (double t : nice_ticks(lo, hi)) {
        svg += line(left - 5, ymap(t), left, ymap(t));
        svg += text(left - 8, ymap(t) + 4, num(t, "%g"), "end");
      }
      const double ym = kMarginT + ph / 2;
      svg += text(16, ym, "Signed anomaly score", "middle", " transform=\"rotate(-90 16 " + num(ym) + ")\"");
    }
  }
  svg += "</svg>\n";
  return svg;
}

std::string score_strip_csv(std::span<const ScoreRow> rows) {
  std::string out = "panel,index,signed_score\n";
  for (const char* panel : kScorePanels) {
    for (const auto& r : rows) {
      if (r.partition == panel) out += r.partition + "," + std::to_string(r.index) + "," + num(r.signed_score, "%.17g") + "\n";
    }
  }
  return out;
}

ArtifactKind detect_artifact(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::string first;
  std::getline(in, first);
  if (first.rfind("partition,index,signed_score", 0) == 0) return ArtifactKind::scores;
  if (!first.empty() && first.front() == '{') {
    const auto header = nlohmann::json::parse(first, nullptr, false);
    if (header.is_object()) {
      const std::string format = header.value("format", "");
      if (format == "vibdiag.spectrogram") return ArtifactKind::spectrogram;
      if (format == "vibdiag.segments") return ArtifactKind::segments;
      throw DataError("'" + path.string() + "': unknown artifact type '" + format + "'");
    }
  }
  throw DataError("'" + path.string() + "': unknown artifact type (expected a spectrogram or segment archive, or a score CSV)");
}

std::vector<std::filesystem::path> render_artifact(const std::filesystem::path& input,
                                                   const std::filesystem::path& out,
                                                   std::optional<std::size_t> index) {
  auto csv_path = out;
  csv_path.replace_extension(".csv");
  std::error_code ec;
  if (std::filesystem::weakly_canonical(csv_path, ec) == std::filesystem::weakly_canonical(input, ec)) {
    throw UsageError("'" + out.string() + "' would overwrite the input with its data table; choose another name");
  }
  std::string svg, csv;
  switch (detect_artifact(input)) {
    case ArtifactKind::spectrogram: {
      if (index) throw UsageError("--index applies to segment archives only");
      const auto h = heatmap_of(spectro::load_spectrogram(input));
      svg = heatmap_svg(h);
      csv = heatmap_csv(h);
      break;
    }
    case ArtifactKind::segments: {
      const auto segs = spectro::load_segments(input);
      const std::size_t i = index.value_or(0);
      if (i >= segs.size()) {
        throw DataError("'" + input.string() + "' holds " + std::to_string(segs.size()) + " segments, index " +
                        std::to_string(i) + " requested");
      }
      const auto h = heatmap_of(segs[i]);
      svg = heatmap_svg(h);
      csv = heatmap_csv(h);
      break;
    }
    case ArtifactKind::scores: {
      if (index) throw UsageError("--index applies to segment archives only");
      const auto rows = parse_scores_csv(io::read_file(input), "'" + input.string() + "'");
      svg = score_strip_svg(rows);
      csv = score_strip_csv(rows);
      break;
    }
  }
  io::write_file_atomic(out, svg);
  io::write_file_atomic(csv_path, csv);
  return {out, csv_path};
}

}  // namespace vibdiag::render
