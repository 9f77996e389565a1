// SPDX-License-Identifier: Apache-2.0
//
// Shared vocabulary: error categories, component/health enums and seed
// derivation.

#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace vibdiag {

// Error categories double as CLI exit codes.
enum class ErrorKind : int {
  usage = 1,
  config = 2,
  data = 3,
  numeric = 4,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

enum class Health : std::uint8_t { healthy = 0, damaged = 1 };

std::string_view to_string(Health h);
Health parse_health(std::string_view s);

// Monitored components, in label/channel order.
enum class Component : std::uint8_t { ring_gear = 0, lss_bearing = 1, hss_bearing = 2 };

inline constexpr std::size_t kComponentCount = 3;
inline constexpr std::array<Component, kComponentCount> kComponents = {
    Component::ring_gear, Component::lss_bearing, Component::hss_bearing};

std::string_view to_string(Component c);
Component parse_component(std::string_view s);

// Sub-seed derivation: splitmix64(master ^ fnv1a64(tag)). Used everywhere a
// role needs its own reproducible random stream.
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag);
std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t splitmix64(std::uint64_t x);

}  // namespace vibdiag
