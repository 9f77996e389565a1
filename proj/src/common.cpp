// SPDX-License-Identifier: Apache-2.0

#include "vibdiag/common.hpp"

namespace vibdiag {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return "usage";
    case ErrorKind::config: return "config";
    case ErrorKind::data: return "data";
    case ErrorKind::numeric: return "numeric";
  }
  return "unknown";
}

std::string_view to_string(Health h) {
  return h == Health::healthy ? "healthy" : "damaged";
}

Health parse_health(std::string_view s) {
  if (s == "healthy") return Health::healthy;
  if (s == "damaged") return Health::damaged;
  throw DataError("unknown health state '" + std::string(s) + "'");
}

std::string_view to_string(Component c) {
  switch (c) {
    case Component::ring_gear: return "ring_gear";
    case Component::lss_bearing: return "lss_bearing";
    case Component::hss_bearing: return "hss_bearing";
  }
  return "unknown";
}

Component parse_component(std::string_view s) {
  for (Component c : kComponents) {
    if (to_string(c) == s) return c;
  }
  throw DataError("unknown component '" + std::string(s) + "'");
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view tag) {
  return splitmix64(master ^ fnv1a64(tag));
}

}  // namespace vibdiag
