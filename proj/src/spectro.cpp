// SPDX-License-Identifier: Apache-2.0

#include "vibdiag/spectro.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "vibdiag/fft.hpp"
#include "vibdiag/io.hpp"

namespace vibdiag::spectro {

namespace {

constexpr int kSpectrogramVersion = 1;
constexpr int kSegmentsVersion = 1;

std::size_t whole_samples(double seconds, double fs, const char* field) {
  const double n = seconds * fs;
  const double r = std::round(n);
  if (r < 1.0 || std::abs(n - r) > 1e-6 * std::max(1.0, r)) {
    std::ostringstream msg;
    msg << "stft config: " << field << " = " << seconds << " s is not a whole number of samples at "
        << fs << " Hz";
    throw ConfigError(msg.str());
  }
  return static_cast<std::size_t>(r);
}

std::vector<double> make_window(WindowFn fn, std::size_t n) {
  std::vector<double> w(n, 1.0);
  if (fn == WindowFn::hann) {
    // Periodic Hann.
    for (std::size_t i = 0; i < n; ++i) {
      w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                  static_cast<double>(n));
    }
  }
  return w;
}

}  // namespace

std::string_view to_string(WindowFn w) { return w == WindowFn::hann ? "hann" : "rectangular"; }

WindowFn parse_window_fn(std::string_view s) {
  if (s == "hann") return WindowFn::hann;
  if (s == "rectangular") return WindowFn::rectangular;
  throw ConfigError("window_fn: unknown window '" + std::string(s) + "' (hann | rectangular)");
}

nlohmann::json to_json(const StftConfig& cfg) {
  return {{"window_s", cfg.window_s},         {"hop_s", cfg.hop_s},
          {"window_fn", to_string(cfg.window_fn)}, {"fmax_hz", cfg.fmax_hz},
          {"log_amplitude", cfg.log_amplitude}, {"log_epsilon", cfg.log_epsilon}};
}

StftConfig stft_config_from_json(const nlohmann::json& j, StftConfig cfg) {
  if (!j.is_object()) throw ConfigError("stft: expected an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "window_s") cfg.window_s = value.get<double>();
      else if (key == "hop_s") cfg.hop_s = value.get<double>();
      else if (key == "window_fn") cfg.window_fn = parse_window_fn(value.get<std::string>());
      else if (key == "fmax_hz") cfg.fmax_hz = value.get<double>();
      else if (key == "log_amplitude") cfg.log_amplitude = value.get<bool>();
      else if (key == "log_epsilon") cfg.log_epsilon = value.get<double>();
      else throw ConfigError("stft." + key + ": unknown field");
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("stft." + key + ": wrong type");
    }
  }
  return cfg;
}

void validate(const StftConfig& cfg, double fs) {
  if (!(cfg.window_s > 0.0)) throw ConfigError("stft.window_s must be > 0");
  if (!(cfg.hop_s > 0.0)) throw ConfigError("stft.hop_s must be > 0");
  if (cfg.hop_s > cfg.window_s) throw ConfigError("stft.hop_s must not exceed stft.window_s");
  if (!(cfg.fmax_hz > 0.0)) throw ConfigError("stft.fmax_hz must be > 0");
  if (cfg.fmax_hz > fs / 2.0 + 1e-9) {
    throw ConfigError("stft.fmax_hz " + std::to_string(cfg.fmax_hz) + " exceeds Nyquist " +
                      std::to_string(fs / 2.0));
  }
  if (!(cfg.log_epsilon > 0.0)) throw ConfigError("stft.log_epsilon must be > 0");
  whole_samples(cfg.window_s, fs, "window_s");
  whole_samples(cfg.hop_s, fs, "hop_s");
}

std::size_t window_samples(const StftConfig& cfg, double fs) {
  return whole_samples(cfg.window_s, fs, "window_s");
}

std::size_t hop_samples(const StftConfig& cfg, double fs) {
  return whole_samples(cfg.hop_s, fs, "hop_s");
}

std::size_t retained_bins(const StftConfig& cfg, double fs) {
  const std::size_t n = window_samples(cfg, fs);
  const double kmax = std::floor(cfg.fmax_hz * static_cast<double>(n) / fs + 1e-9);
  return std::min(static_cast<std::size_t>(kmax), n / 2) + 1;
}

double bin_spacing_hz(const StftConfig& cfg, double fs) {
  return fs / static_cast<double>(window_samples(cfg, fs));
}

std::size_t frames_per_segment(const StftConfig& cfg, double duration_s) {
  if (duration_s + 1e-12 < cfg.window_s) {
    throw ConfigError("segment duration " + std::to_string(duration_s) +
                      " s is shorter than one STFT window");
  }
  return static_cast<std::size_t>(std::floor((duration_s - cfg.window_s) / cfg.hop_s + 1e-9)) + 1;
}

Spectrogram stft(const siggen::TimeSeries& ts, const StftConfig& cfg) {
  const double fs = ts.sample_rate_hz;
  validate(cfg, fs);
  const std::size_t n = window_samples(cfg, fs);
  const std::size_t hop = hop_samples(cfg, fs);
  if (ts.samples.size() < n) {
    throw DataError("series of " + std::to_string(ts.samples.size()) +
                    " samples is shorter than one STFT window (" + std::to_string(n) + ")");
  }
  Spectrogram spec;
  spec.frames = (ts.samples.size() - n) / hop + 1;
  spec.bins = retained_bins(cfg, fs);
  spec.config = cfg;
  spec.sample_rate_hz = fs;
  spec.channel = ts.channel;
  spec.health = ts.health;
  spec.seed = ts.seed;
  spec.magnitudes.resize(spec.frames * spec.bins);
  spec.frame_times_s.resize(spec.frames);
  spec.bin_freqs_hz.resize(spec.bins);
  for (std::size_t k = 0; k < spec.bins; ++k) {
    spec.bin_freqs_hz[k] = static_cast<double>(k) * fs / static_cast<double>(n);
  }

  const fft::Plan plan(n);
  const std::vector<double> window = make_window(cfg.window_fn, n);
  std::vector<fft::Complex> buf(n);
  for (std::size_t f = 0; f < spec.frames; ++f) {
    const std::size_t start = f * hop;
    spec.frame_times_s[f] = static_cast<double>(start) / fs;
    for (std::size_t i = 0; i < n; ++i) {
      buf[i] = {window[i] * static_cast<double>(ts.samples[start + i]), 0.0};
    }
    plan.forward(buf);
    double* row = spec.magnitudes.data() + f * spec.bins;
    for (std::size_t k = 0; k < spec.bins; ++k) {
      const double m = std::abs(buf[k]);
      row[k] = cfg.log_amplitude ? std::log10(m + cfg.log_epsilon) : m;
    }
  }
  return spec;
}

double SegmentLayout::duration_s() const {
  return stft.window_s + static_cast<double>(frames - 1) * stft.hop_s;
}

nlohmann::json to_json(const SegmentLayout& layout) {
  return {{"stft", to_json(layout.stft)},
          {"sample_rate_hz", layout.sample_rate_hz},
          {"frames", layout.frames},
          {"bins", layout.bins},
          {"channels", layout.channels}};
}

SegmentLayout segment_layout_from_json(const nlohmann::json& j) {
  try {
    SegmentLayout l;
    l.stft = stft_config_from_json(j.at("stft"));
    l.sample_rate_hz = j.at("sample_rate_hz").get<double>();
    l.frames = j.at("frames").get<std::size_t>();
    l.bins = j.at("bins").get<std::size_t>();
    l.channels = j.at("channels").get<std::size_t>();
    return l;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("segment layout: ") + e.what());
  }
}

std::string SegmentLayout::fingerprint() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(to_json(*this).dump())));
  return buf;
}

SpectrogramSegment extract_segment(const Spectrogram& spec, std::size_t offset, std::size_t frames) {
  if (frames == 0 || offset + frames > spec.frames) {
    throw DataError("segment [" + std::to_string(offset) + ", " + std::to_string(offset + frames) +
                    ") exceeds spectrogram of " + std::to_string(spec.frames) + " frames");
  }
  SpectrogramSegment seg;
  seg.layout = {spec.config, spec.sample_rate_hz, frames, spec.bins, 1};
  seg.magnitudes.resize(frames * spec.bins);
  const double* src = spec.magnitudes.data() + offset * spec.bins;
  for (std::size_t i = 0; i < seg.magnitudes.size(); ++i) seg.magnitudes[i] = static_cast<float>(src[i]);
  seg.source_offsets = {offset};
  seg.channels = {spec.channel};
  seg.health = {spec.health};
  return seg;
}

std::vector<SpectrogramSegment> sample_segments(const Spectrogram& spec, double duration_s,
                                                std::size_t count, std::uint64_t seed) {
  if (count == 0) throw ConfigError("sample_segments: count must be >= 1");
  const std::size_t frames = frames_per_segment(spec.config, duration_s);
  if (frames > spec.frames) {
    throw DataError("segment duration " + std::to_string(duration_s) +
                    " s exceeds the spectrogram span");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, spec.frames - frames);
  std::vector<SpectrogramSegment> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(extract_segment(spec, pick(rng), frames));
  return out;
}

SpectrogramSegment stack_channels(std::span<const SpectrogramSegment> parts,
                                  std::optional<Labels> labels) {
  if (parts.size() != kComponentCount) {
    throw DataError("stack_channels: expected " + std::to_string(kComponentCount) +
                    " segments, got " + std::to_string(parts.size()));
  }
  const SegmentLayout& base = parts[0].layout;
  for (std::size_t c = 0; c < parts.size(); ++c) {
    const SegmentLayout& l = parts[c].layout;
    if (l.channels != 1 || l.frames != base.frames || l.bins != base.bins || !(l.stft == base.stft) ||
        l.sample_rate_hz != base.sample_rate_hz) {
      throw DataError("stack_channels: segment " + std::to_string(c) + " has shape " +
                      std::to_string(l.frames) + "x" + std::to_string(l.bins) + "x" +
                      std::to_string(l.channels) + ", expected " + std::to_string(base.frames) +
                      "x" + std::to_string(base.bins) + "x1 with identical STFT config");
    }
    const std::string expected(to_string(kComponents[c]));
    if (!parts[c].channels.empty() && !parts[c].channels[0].empty() &&
        parts[c].channels[0] != expected) {
      throw DataError("stack_channels: channel " + std::to_string(c) + " is '" +
                      parts[c].channels[0] + "', expected '" + expected + "'");
    }
  }
  SpectrogramSegment out;
  out.layout = base;
  out.layout.channels = kComponentCount;
  out.magnitudes.resize(base.frames * base.bins * kComponentCount);
  Labels derived{};
  for (std::size_t c = 0; c < kComponentCount; ++c) {
    const auto& src = parts[c].magnitudes;
    for (std::size_t i = 0; i < src.size(); ++i) out.magnitudes[i * kComponentCount + c] = src[i];
    const Health h = parts[c].health.empty() ? Health::healthy : parts[c].health[0];
    derived[c] = h == Health::damaged ? 1 : 0;
    out.source_offsets.push_back(parts[c].source_offsets.empty() ? 0 : parts[c].source_offsets[0]);
    out.channels.emplace_back(to_string(kComponents[c]));
    out.health.push_back(h);
  }
  if (labels && *labels != derived) {
    throw DataError("stack_channels: labels disagree with channel health states");
  }
  out.labels = derived;
  return out;
}

void SourcePools::set(Component c, Health h, std::shared_ptr<const Spectrogram> spec) {
  grid_[static_cast<std::size_t>(c)][static_cast<std::size_t>(h)] = std::move(spec);
}

bool SourcePools::has(Component c, Health h) const {
  return grid_[static_cast<std::size_t>(c)][static_cast<std::size_t>(h)] != nullptr;
}

const Spectrogram& SourcePools::at(Component c, Health h) const {
  const auto& p = grid_[static_cast<std::size_t>(c)][static_cast<std::size_t>(h)];
  if (!p) {
    throw DataError("no " + std::string(to_string(h)) + " spectrogram for component " +
                    std::string(to_string(c)));
  }
  return *p;
}

void SourcePools::validate() const {
  const Spectrogram* first = nullptr;
  for (const auto& row : grid_) {
    for (const auto& p : row) {
      if (!p) continue;
      if (!first) {
        first = p.get();
        continue;
      }
      if (!(p->config == first->config) || p->sample_rate_hz != first->sample_rate_hz ||
          p->bins != first->bins) {
        throw DataError("source spectrograms disagree on STFT config or sample rate ('" +
                        first->channel + "' vs '" + p->channel + "')");
      }
    }
  }
  if (!first) throw DataError("no source spectrograms");
}

const StftConfig& SourcePools::config() const {
  for (const auto& row : grid_)
    for (const auto& p : row)
      if (p) return p->config;
  throw DataError("no source spectrograms");
}

double SourcePools::sample_rate_hz() const {
  for (const auto& row : grid_)
    for (const auto& p : row)
      if (p) return p->sample_rate_hz;
  throw DataError("no source spectrograms");
}

std::size_t SourcePools::common_frames() const {
  std::size_t frames = 0;
  bool any = false;
  for (const auto& row : grid_) {
    for (const auto& p : row) {
      if (!p) continue;
      frames = any ? std::min(frames, p->frames) : p->frames;
      any = true;
    }
  }
  return frames;
}

SegmentSet::SegmentSet(std::shared_ptr<const SourcePools> pools, std::size_t frames,
                       std::vector<Instance> instances)
    : pools_(std::move(pools)), frames_(frames), instances_(std::move(instances)) {}

SegmentSet::SegmentSet(std::vector<SpectrogramSegment> segments)
    : owned_(std::make_shared<const std::vector<SpectrogramSegment>>(std::move(segments))) {
  if (!owned_->empty()) frames_ = owned_->front().layout.frames;
}

std::size_t SegmentSet::size() const { return owned_ ? owned_->size() : instances_.size(); }

SpectrogramSegment SegmentSet::at(std::size_t i) const {
  if (owned_) return owned_->at(i);
  const Instance& inst = instances_.at(i);
  std::array<SpectrogramSegment, kComponentCount> parts;
  for (std::size_t c = 0; c < kComponentCount; ++c) {
    const Health h = inst.labels[c] ? Health::damaged : Health::healthy;
    parts[c] = extract_segment(pools_->at(kComponents[c], h), inst.offset, frames_);
    parts[c].channels = {std::string(to_string(kComponents[c]))};
  }
  return stack_channels(parts, inst.labels);
}

Labels SegmentSet::labels(std::size_t i) const {
  if (owned_) {
    const auto& seg = owned_->at(i);
    if (!seg.labels) throw DataError("segment " + std::to_string(i) + " carries no labels");
    return *seg.labels;
  }
  return instances_.at(i).labels;
}

SegmentLayout SegmentSet::layout() const {
  if (owned_) {
    if (owned_->empty()) throw DataError("empty segment set has no layout");
    return owned_->front().layout;
  }
  if (!pools_) throw DataError("segment set has no source pools");
  return {pools_->config(), pools_->sample_rate_hz(), frames_,
          retained_bins(pools_->config(), pools_->sample_rate_hz()), kComponentCount};
}

std::array<std::size_t, 3> split_sizes(std::size_t total, const SplitRatios& r) {
  if (!(r.train > 0.0) || !(r.validation > 0.0) || !(r.test > 0.0)) {
    throw ConfigError("split ratios must all be positive");
  }
  const double sum = r.train + r.validation + r.test;
  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(total) * r.train / sum));
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(total) * r.validation / sum));
  if (n_train + n_val > total) throw ConfigError("split ratios leave no room for a test set");
  return {n_train, n_val, total - n_train - n_val};
}

LabeledDataset assemble_dataset(std::shared_ptr<const SourcePools> pools,
                                const DatasetOptions& options, std::size_t total,
                                std::uint64_t seed) {
  if (!pools) throw DataError("assemble_dataset: no source pools");
  if (total == 0) throw ConfigError("dataset total must be >= 1");
  if (!(options.damaged_fraction >= 0.0 && options.damaged_fraction <= 1.0)) {
    throw ConfigError("damaged_fraction must lie in [0, 1]");
  }
  pools->validate();
  for (Component c : kComponents) {
    pools->at(c, Health::healthy);
    pools->at(c, Health::damaged);
  }
  const auto sizes = split_sizes(total, options.ratios);
  const std::size_t frames = frames_per_segment(pools->config(), options.segment_duration_s);
  const std::size_t available = pools->common_frames();
  if (frames > available) {
    throw DataError("segment duration " + std::to_string(options.segment_duration_s) +
                    " s exceeds the spectrogram span");
  }

  std::mt19937_64 rng(seed);
  const auto n_damaged =
      static_cast<std::size_t>(std::llround(options.damaged_fraction * static_cast<double>(total)));
  std::vector<Instance> instances(total);
  if (options.mix_channels) {
    // Exact per-component marginals, independent shuffles per component.
    for (std::size_t c = 0; c < kComponentCount; ++c) {
      std::vector<std::uint8_t> column(total, 0);
      std::fill(column.begin(), column.begin() + static_cast<std::ptrdiff_t>(n_damaged), 1);
      std::shuffle(column.begin(), column.end(), rng);
      for (std::size_t i = 0; i < total; ++i) instances[i].labels[c] = column[i];
    }
  } else {
    for (std::size_t i = 0; i < total; ++i) {
      const std::uint8_t v = i < n_damaged ? 1 : 0;
      instances[i].labels = {v, v, v};
    }
  }
  std::uniform_int_distribution<std::size_t> pick(0, available - frames);
  for (auto& inst : instances) inst.offset = pick(rng);
  std::shuffle(instances.begin(), instances.end(), rng);

  LabeledDataset ds;
  ds.ratios = options.ratios;
  ds.segment_duration_s = options.segment_duration_s;
  ds.seed = seed;

  std::set<std::pair<unsigned, std::size_t>> unique;
  std::array<std::size_t, kComponentCount> damaged{};
  for (const auto& inst : instances) {
    unsigned key = 0;
    for (std::size_t c = 0; c < kComponentCount; ++c) {
      key = key * 2 + inst.labels[c];
      damaged[c] += inst.labels[c];
    }
    unique.emplace(key, inst.offset);
  }
  ds.report.unique_source_offsets = unique.size();
  for (std::size_t c = 0; c < kComponentCount; ++c) {
    ds.report.damaged_marginals[c] = static_cast<double>(damaged[c]) / static_cast<double>(total);
    if (std::abs(ds.report.damaged_marginals[c] - options.damaged_fraction) > 0.05) {
      ds.report.warnings.push_back("label marginal for " + std::string(to_string(kComponents[c])) +
                                   " deviates more than 5% from the requested balance");
    }
  }
  if (static_cast<double>(unique.size()) < 0.1 * static_cast<double>(total)) {
    ds.report.warnings.push_back("insufficient pool diversity: " + std::to_string(unique.size()) +
                                 " unique source offsets for " + std::to_string(total) +
                                 " instances (< 10%)");
  }

  auto begin = instances.begin();
  auto slice = [&](std::size_t n) {
    std::vector<Instance> part(begin, begin + static_cast<std::ptrdiff_t>(n));
    begin += static_cast<std::ptrdiff_t>(n);
    return SegmentSet(pools, frames, std::move(part));
  };
  ds.train = slice(sizes[0]);
  ds.validation = slice(sizes[1]);
  ds.test = slice(sizes[2]);
  return ds;
}

OneClassSets assemble_one_class_sets(std::shared_ptr<const SourcePools> pools,
                                     double segment_duration_s, std::size_t train_healthy,
                                     std::size_t test_healthy, std::size_t test_damaged,
                                     std::uint64_t seed) {
  if (!pools) throw DataError("assemble_one_class_sets: no source pools");
  if (train_healthy < 2) throw ConfigError("one-class training needs at least 2 healthy segments");
  pools->validate();
  const std::size_t frames = frames_per_segment(pools->config(), segment_duration_s);
  const std::size_t available = pools->common_frames();
  if (frames > available) {
    throw DataError("segment duration " + std::to_string(segment_duration_s) +
                    " s exceeds the spectrogram span");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, available - frames);

  std::vector<Instance> healthy(train_healthy + test_healthy);
  for (auto& inst : healthy) inst = {{0, 0, 0}, pick(rng)};
  std::shuffle(healthy.begin(), healthy.end(), rng);
  std::vector<Instance> damaged(test_damaged);
  for (auto& inst : damaged) inst = {{1, 1, 1}, pick(rng)};

  OneClassSets sets;
  sets.train_healthy = SegmentSet(
      pools, frames,
      std::vector<Instance>(healthy.begin(), healthy.begin() + static_cast<std::ptrdiff_t>(train_healthy)));
  sets.test_healthy = SegmentSet(
      pools, frames,
      std::vector<Instance>(healthy.begin() + static_cast<std::ptrdiff_t>(train_healthy), healthy.end()));
  sets.test_damaged = SegmentSet(pools, frames, std::move(damaged));
  return sets;
}

void save_spectrogram(const Spectrogram& spec, const std::filesystem::path& path) {
  nlohmann::json header = {
      {"format", "vibdiag.spectrogram"},
      {"version", kSpectrogramVersion},
      {"frames", spec.frames},
      {"bins", spec.bins},
      {"sample_rate_hz", spec.sample_rate_hz},
      {"stft", to_json(spec.config)},
      {"channel", spec.channel},
      {"health", to_string(spec.health)},
      {"seed", spec.seed},
      {"layout", "frame-major, then bin"},
  };
  std::vector<float> payload(spec.magnitudes.begin(), spec.magnitudes.end());
  io::write_container(path, std::move(header), io::encode_f32le(payload));
}

Spectrogram load_spectrogram(const std::filesystem::path& path) {
  const io::Container c = io::read_container(path, "vibdiag.spectrogram", kSpectrogramVersion);
  Spectrogram spec;
  try {
    spec.frames = c.header.at("frames").get<std::size_t>();
    spec.bins = c.header.at("bins").get<std::size_t>();
    spec.sample_rate_hz = c.header.at("sample_rate_hz").get<double>();
    spec.config = stft_config_from_json(c.header.at("stft"));
    spec.channel = c.header.at("channel").get<std::string>();
    spec.health = parse_health(c.header.at("health").get<std::string>());
    spec.seed = c.header.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path.string() + "': " + e.what());
  }
  const auto values = io::decode_f32le(c.payload);
  if (values.size() != spec.frames * spec.bins) {
    throw DataError("'" + path.string() + "': payload holds " + std::to_string(values.size()) +
                    " values, header shape needs " + std::to_string(spec.frames * spec.bins));
  }
  spec.magnitudes.assign(values.begin(), values.end());
  const std::size_t n = window_samples(spec.config, spec.sample_rate_hz);
  const std::size_t hop = hop_samples(spec.config, spec.sample_rate_hz);
  spec.frame_times_s.resize(spec.frames);
  for (std::size_t f = 0; f < spec.frames; ++f) {
    spec.frame_times_s[f] = static_cast<double>(f * hop) / spec.sample_rate_hz;
  }
  spec.bin_freqs_hz.resize(spec.bins);
  for (std::size_t k = 0; k < spec.bins; ++k) {
    spec.bin_freqs_hz[k] = static_cast<double>(k) * spec.sample_rate_hz / static_cast<double>(n);
  }
  return spec;
}

void save_segments(std::span<const SpectrogramSegment> segments, const std::filesystem::path& path) {
  if (segments.empty()) throw DataError("save_segments: nothing to save");
  const SegmentLayout& layout = segments.front().layout;
  nlohmann::json entries = nlohmann::json::array();
  std::vector<float> payload;
  payload.reserve(segments.size() * layout.frames * layout.bins * layout.channels);
  for (const auto& seg : segments) {
    if (!(seg.layout == layout)) throw DataError("save_segments: segments differ in shape");
    nlohmann::json e = {{"source_offsets", seg.source_offsets}, {"channels", seg.channels}};
    nlohmann::json health = nlohmann::json::array();
    for (Health h : seg.health) health.push_back(to_string(h));
    e["health"] = health;
    if (seg.labels) e["labels"] = *seg.labels;
    entries.push_back(std::move(e));
    payload.insert(payload.end(), seg.magnitudes.begin(), seg.magnitudes.end());
  }
  nlohmann::json header = {
      {"format", "vibdiag.segments"},
      {"version", kSegmentsVersion},
      {"count", segments.size()},
      {"layout", to_json(layout)},
      {"fingerprint", layout.fingerprint()},
      {"order", "segment, then frame, then bin, then channel"},
      {"segments", entries},
  };
  io::write_container(path, std::move(header), io::encode_f32le(payload));
}

std::vector<SpectrogramSegment> load_segments(const std::filesystem::path& path) {
  const io::Container c = io::read_container(path, "vibdiag.segments", kSegmentsVersion);
  const SegmentLayout layout = segment_layout_from_json(c.header.at("layout"));
  const auto values = io::decode_f32le(c.payload);
  const std::size_t per = layout.frames * layout.bins * layout.channels;
  std::vector<SpectrogramSegment> out;
  try {
    const auto& entries = c.header.at("segments");
    if (values.size() != per * entries.size()) {
      throw DataError("'" + path.string() + "': payload does not match " +
                      std::to_string(entries.size()) + " segments of " + std::to_string(per) +
                      " values");
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      SpectrogramSegment seg;
      seg.layout = layout;
      seg.magnitudes.assign(values.begin() + static_cast<std::ptrdiff_t>(i * per),
                            values.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
      seg.source_offsets = e.at("source_offsets").get<std::vector<std::size_t>>();
      seg.channels = e.at("channels").get<std::vector<std::string>>();
      for (const auto& h : e.at("health")) seg.health.push_back(parse_health(h.get<std::string>()));
      if (e.contains("labels")) seg.labels = e.at("labels").get<Labels>();
      out.push_back(std::move(seg));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw DataError("'" + path.string() + "': " + ex.what());
  }
  return out;
}

}  // namespace vibdiag::spectro
