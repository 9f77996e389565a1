// SPDX-License-Identifier: Apache-2.0

#include "vibdiag/siggen.hpp"

#include <charconv>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "vibdiag/io.hpp"

namespace vibdiag::siggen {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

ComponentProfile make_profile(std::string name, std::vector<Tone> tones, double sigma,
                              FaultSignature fault) {
  return ComponentProfile{std::move(name), std::move(tones), sigma, fault};
}

std::size_t sample_count(double duration_s, double sample_rate_hz) {
  if (!(duration_s > 0.0) || !std::isfinite(duration_s)) {
    throw ConfigError("duration_s must be positive, got " + std::to_string(duration_s));
  }
  const double n = duration_s * sample_rate_hz;
  const double rounded = std::round(n);
  if (std::abs(n - rounded) > 1e-6 * std::max(1.0, rounded)) {
    std::ostringstream msg;
    msg << "duration_s " << duration_s << " at " << sample_rate_hz
        << " Hz is not a whole number of samples";
    throw ConfigError(msg.str());
  }
  return static_cast<std::size_t>(rounded);
}

}  // namespace

RigProfile default_rig() {
  RigProfile rig;
  // Tone lines sit on integer frequencies so they fall on DFT bins of any
  // whole-second analysis window.
  rig.components = {
      make_profile("ring_gear", {{36, 1.0}, {73, 0.5}, {109, 0.3}, {218, 0.15}}, 0.4,
                   {.sideband_spacing_hz = 6, .sideband_amplitude = 0.5, .impulse_rate_hz = 11,
                    .impulse_amplitude = 4.0, .noise_floor_gain = 2.5}),
      make_profile("lss_bearing", {{8, 0.4}, {36, 0.3}, {150, 0.5}, {300, 0.2}}, 0.3,
                   {.sideband_spacing_hz = 8, .sideband_amplitude = 0.4, .impulse_rate_hz = 23,
                    .impulse_amplitude = 3.0, .noise_floor_gain = 2.5}),
      make_profile("hss_bearing", {{30, 0.4}, {60, 0.3}, {660, 1.0}, {1320, 0.4}}, 0.5,
                   {.sideband_spacing_hz = 30, .sideband_amplitude = 0.5,
                    .impulse_rate_hz = 107, .impulse_amplitude = 3.0,
                    .noise_floor_gain = 2.5}),
  };
  return rig;
}

void validate(const ComponentProfile& profile, double sample_rate_hz) {
  const double nyquist = sample_rate_hz / 2.0;
  const std::string where = "component '" + profile.name + "': ";
  if (!(profile.noise_sigma >= 0.0)) throw ConfigError(where + "noise_sigma must be >= 0");
  const FaultSignature& f = profile.fault;
  if (!(f.sideband_spacing_hz > 0.0)) throw ConfigError(where + "sideband_spacing_hz must be > 0");
  if (!(f.sideband_amplitude >= 0.0)) throw ConfigError(where + "sideband_amplitude must be >= 0");
  if (!(f.impulse_rate_hz >= 0.0)) throw ConfigError(where + "impulse_rate_hz must be >= 0");
  if (!(f.impulse_amplitude >= 0.0)) throw ConfigError(where + "impulse_amplitude must be >= 0");
  if (!(f.noise_floor_gain >= 1.0)) throw ConfigError(where + "noise_floor_gain must be >= 1");
  for (const Tone& t : profile.tones) {
    if (!(t.amplitude >= 0.0)) throw ConfigError(where + "tone amplitude must be >= 0");
    if (!(t.frequency_hz >= 0.0) || t.frequency_hz >= nyquist) {
      std::ostringstream msg;
      msg << where << "tone " << t.frequency_hz << " Hz is not below Nyquist (" << nyquist
          << " Hz)";
      throw ConfigError(msg.str());
    }
    if (f.sideband_amplitude > 0.0 && t.frequency_hz + f.sideband_spacing_hz >= nyquist) {
      std::ostringstream msg;
      msg << where << "upper sideband of " << t.frequency_hz << " Hz reaches Nyquist ("
          << nyquist << " Hz)";
      throw ConfigError(msg.str());
    }
  }
}

void validate(const RigProfile& rig) {
  if (!(rig.sample_rate_hz > 0.0)) throw ConfigError("sample_rate_hz must be > 0");
  if (!(rig.lss_speed_rpm > 0.0)) throw ConfigError("lss_speed_rpm must be > 0");
  if (!(rig.hss_speed_rpm > 0.0)) throw ConfigError("hss_speed_rpm must be > 0");
  if (!(rig.transmission_ratio > 0.0)) throw ConfigError("transmission_ratio must be > 0");
  const double implied = rig.hss_speed_rpm / rig.lss_speed_rpm;
  if (std::abs(implied - rig.transmission_ratio) > 0.01 * rig.transmission_ratio) {
    std::ostringstream msg;
    msg << "hss_speed_rpm / lss_speed_rpm = " << implied
        << " is not within 1% of transmission_ratio " << rig.transmission_ratio;
    throw ConfigError(msg.str());
  }
  for (const auto& c : rig.components) validate(c, rig.sample_rate_hz);
}

nlohmann::json to_json(const RigProfile& rig) {
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : rig.components) {
    nlohmann::json tones = nlohmann::json::array();
    for (const auto& t : c.tones) tones.push_back({t.frequency_hz, t.amplitude});
    comps.push_back({
        {"name", c.name},
        {"tones", tones},
        {"noise_sigma", c.noise_sigma},
        {"fault_signature",
         {{"sideband_spacing_hz", c.fault.sideband_spacing_hz},
          {"sideband_amplitude", c.fault.sideband_amplitude},
          {"impulse_rate_hz", c.fault.impulse_rate_hz},
          {"impulse_amplitude", c.fault.impulse_amplitude},
          {"noise_floor_gain", c.fault.noise_floor_gain}}},
    });
  }
  return {
      {"sample_rate_hz", rig.sample_rate_hz},
      {"lss_speed_rpm", rig.lss_speed_rpm},
      {"hss_speed_rpm", rig.hss_speed_rpm},
      {"transmission_ratio", rig.transmission_ratio},
      {"components", comps},
  };
}

RigProfile rig_from_json(const nlohmann::json& j) {
  RigProfile rig = default_rig();
  try {
    rig.sample_rate_hz = j.value("sample_rate_hz", rig.sample_rate_hz);
    rig.lss_speed_rpm = j.value("lss_speed_rpm", rig.lss_speed_rpm);
    rig.hss_speed_rpm = j.value("hss_speed_rpm", rig.hss_speed_rpm);
    rig.transmission_ratio = j.value("transmission_ratio", rig.transmission_ratio);
    if (j.contains("components")) {
      rig.components.clear();
      for (const auto& jc : j.at("components")) {
        ComponentProfile c;
        c.name = jc.at("name").get<std::string>();
        for (const auto& jt : jc.at("tones")) {
          c.tones.push_back({jt.at(0).get<double>(), jt.at(1).get<double>()});
        }
        c.noise_sigma = jc.value("noise_sigma", 0.0);
        if (jc.contains("fault_signature")) {
          const auto& jf = jc.at("fault_signature");
          c.fault.sideband_spacing_hz = jf.value("sideband_spacing_hz", 1.0);
          c.fault.sideband_amplitude = jf.value("sideband_amplitude", 0.0);
          c.fault.impulse_rate_hz = jf.value("impulse_rate_hz", 0.0);
          c.fault.impulse_amplitude = jf.value("impulse_amplitude", 0.0);
          c.fault.noise_floor_gain = jf.value("noise_floor_gain", 1.0);
        }
        rig.components.push_back(std::move(c));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("rig profile: ") + e.what());
  }
  validate(rig);
  return rig;
}

TimeSeries generate_signal(const ComponentProfile& profile, const RigProfile& rig, Health health,
                           double duration_s, std::uint64_t seed) {
  validate(profile, rig.sample_rate_hz);
  const double fs = rig.sample_rate_hz;
  const std::size_t n = sample_count(duration_s, fs);
  const bool damaged = health == Health::damaged;
  const FaultSignature& fault = profile.fault;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Draw every random parameter regardless of health so that an identity
  // fault signature reproduces the healthy signal exactly.
  std::vector<double> tone_phase(profile.tones.size());
  std::vector<double> mod_phase(profile.tones.size());
  for (std::size_t k = 0; k < profile.tones.size(); ++k) {
    tone_phase[k] = kTwoPi * unit(rng);
    mod_phase[k] = kTwoPi * unit(rng);
  }
  const double impulse_offset = unit(rng);

  const double mod_index = damaged ? fault.sideband_amplitude : 0.0;
  const double sigma = profile.noise_sigma * (damaged ? fault.noise_floor_gain : 1.0);

  std::vector<double> x(n, 0.0);
  for (std::size_t k = 0; k < profile.tones.size(); ++k) {
    const Tone& tone = profile.tones[k];
    if (tone.amplitude == 0.0) continue;
    const double w = kTwoPi * tone.frequency_hz / fs;
    const double wm = kTwoPi * fault.sideband_spacing_hz / fs;
    for (std::size_t i = 0; i < n; ++i) {
      const double carrier = tone.amplitude * std::cos(w * static_cast<double>(i) + tone_phase[k]);
      const double envelope =
          mod_index > 0.0 ? 1.0 + mod_index * std::cos(wm * static_cast<double>(i) + mod_phase[k])
                          : 1.0;
      x[i] += carrier * envelope;
    }
  }

  if (damaged && fault.impulse_rate_hz > 0.0 && fault.impulse_amplitude > 0.0) {
    const double period = fs / fault.impulse_rate_hz;
    for (double t = impulse_offset * period; t < static_cast<double>(n); t += period) {
      const auto idx = static_cast<std::size_t>(std::llround(t));
      if (idx < n) x[idx] += fault.impulse_amplitude;
    }
  }

  // Noise draws happen for healthy and damaged alike; only the scale differs.
  for (std::size_t i = 0; i < n; ++i) {
    const double z = gauss(rng);
    if (sigma > 0.0) x[i] += sigma * z;
  }

  TimeSeries ts;
  ts.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) ts.samples[i] = static_cast<float>(x[i]);
  ts.sample_rate_hz = fs;
  ts.channel = profile.name;
  ts.health = health;
  ts.seed = seed;
  return ts;
}

SampleFormat parse_sample_format(std::string_view s) {
  if (s == "csv") return SampleFormat::csv;
  if (s == "raw-f32-le") return SampleFormat::raw_f32_le;
  throw ConfigError("unknown sample format '" + std::string(s) + "' (csv | raw-f32-le)");
}

std::string_view to_string(SampleFormat f) {
  return f == SampleFormat::csv ? "csv" : "raw-f32-le";
}

TimeSeries load_timeseries(const std::filesystem::path& path, SampleFormat format,
                           double sample_rate_hz, std::string channel, Health health) {
  if (!(sample_rate_hz > 0.0)) throw ConfigError("sample_rate_hz must be > 0");
  const std::string bytes = io::read_file(path);
  TimeSeries ts;
  ts.sample_rate_hz = sample_rate_hz;
  ts.channel = std::move(channel);
  ts.health = health;

  if (format == SampleFormat::raw_f32_le) {
    if (bytes.size() % 4 != 0) {
      throw DataError("'" + path.string() + "': truncated sample at byte offset " +
                      std::to_string(bytes.size() - bytes.size() % 4));
    }
    ts.samples = io::decode_f32le(bytes);
  } else {
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < bytes.size()) {
      std::size_t end = bytes.find('\n', pos);
      if (end == std::string::npos) end = bytes.size();
      ++line_no;
      std::string_view line(bytes.data() + pos, end - pos);
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      pos = end + 1;
      if (line.empty()) {
        if (pos >= bytes.size()) break;  // trailing newline
        throw DataError("'" + path.string() + "': empty row at line " + std::to_string(line_no));
      }
      float v = 0.0f;
      const auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), v);
      if (ec != std::errc() || ptr != line.data() + line.size() || !std::isfinite(v)) {
        throw DataError("'" + path.string() + "': malformed sample at line " +
                        std::to_string(line_no) + ": '" + std::string(line) + "'");
      }
      ts.samples.push_back(v);
    }
  }
  if (ts.samples.empty()) throw DataError("'" + path.string() + "': no samples");
  for (std::size_t i = 0; i < ts.samples.size(); ++i) {
    if (!std::isfinite(ts.samples[i])) {
      throw DataError("'" + path.string() + "': non-finite sample at index " + std::to_string(i));
    }
  }
  return ts;
}

void save_timeseries(const TimeSeries& ts, const std::filesystem::path& path, SampleFormat format) {
  if (format == SampleFormat::raw_f32_le) {
    io::write_file_atomic(path, io::encode_f32le(ts.samples));
    return;
  }
  std::string out;
  out.reserve(ts.samples.size() * 12);
  char buf[64];
  for (float v : ts.samples) {
    // Shortest representation that parses back to the same float.
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, ptr);
    out.push_back('\n');
  }
  io::write_file_atomic(path, out);
}

}  // namespace vibdiag::siggen
