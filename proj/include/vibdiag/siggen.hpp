// SPDX-License-Identifier: Apache-2.0
//
// Synthetic gearbox vibration signals and raw signal file I/O.
//
// A healthy channel is a sum of tones (mesh lines, shaft harmonics) plus white
// Gaussian noise. A damaged channel additionally carries amplitude-modulation
// sidebands around every tone, a periodic impulse train and a raised noise
// floor. The defaults only aim for spectral separability between the two
// states, not physical fidelity.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "vibdiag/common.hpp"

namespace vibdiag::siggen {

struct Tone {
  double frequency_hz = 0.0;
  double amplitude = 0.0;
};

struct FaultSignature {
  double sideband_spacing_hz = 1.0;
  double sideband_amplitude = 0.0;  // modulation index
  double impulse_rate_hz = 0.0;
  double impulse_amplitude = 0.0;
  double noise_floor_gain = 1.0;
};

struct ComponentProfile {
  std::string name;
  std::vector<Tone> tones;
  double noise_sigma = 0.0;
  FaultSignature fault;
};

struct RigProfile {
  double sample_rate_hz = 40000.0;
  double lss_speed_rpm = 22.09;
  double hss_speed_rpm = 1800.0;
  double transmission_ratio = 81.491;
  std::vector<ComponentProfile> components;
};

// Three-channel rig at 40 kHz with ring gear, LSS bearing and HSS bearing
// channels.
RigProfile default_rig();

// Throws ConfigError naming the offending field.
void validate(const RigProfile& rig);
void validate(const ComponentProfile& profile, double sample_rate_hz);

nlohmann::json to_json(const RigProfile& rig);
RigProfile rig_from_json(const nlohmann::json& j);

struct TimeSeries {
  std::vector<float> samples;
  double sample_rate_hz = 0.0;
  std::string channel;
  Health health = Health::healthy;
  std::uint64_t seed = 0;

  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate_hz; }
};

// Pure function of its arguments. Rejects nonpositive durations, durations
// that are not a whole number of samples, and any tone or sideband at or
// above Nyquist.
TimeSeries generate_signal(const ComponentProfile& profile, const RigProfile& rig, Health health,
                           double duration_s, std::uint64_t seed);

enum class SampleFormat { csv, raw_f32_le };

SampleFormat parse_sample_format(std::string_view s);
std::string_view to_string(SampleFormat f);

TimeSeries load_timeseries(const std::filesystem::path& path, SampleFormat format,
                           double sample_rate_hz, std::string channel = {},
                           Health health = Health::healthy);
void save_timeseries(const TimeSeries& ts, const std::filesystem::path& path, SampleFormat format);

}  // namespace vibdiag::siggen
