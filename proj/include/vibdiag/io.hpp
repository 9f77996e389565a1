// SPDX-License-Identifier: Apache-2.0
//
// File plumbing shared by every persisted artifact.
//
// Binary artifacts use one container layout:
//
//   <single-line JSON header>\n<payload bytes>
//
// The header always carries "format", "version", "payload_bytes" and
// "crc32" (of the payload). Payloads are little-endian float32 arrays unless
// a format says otherwise. Readers refuse unknown formats, other versions,
// short payloads and checksum mismatches.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace vibdiag::io {

using Json = nlohmann::json;

// Writes to a sibling temp file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

std::uint32_t crc32(std::string_view bytes);

std::string encode_f32le(std::span<const float> values);
std::vector<float> decode_f32le(std::string_view bytes);

struct Container {
  Json header;
  std::string payload;
};

void write_container(const std::filesystem::path& path, Json header,
                     std::string_view payload);
Container read_container(const std::filesystem::path& path,
                         std::string_view expected_format, int expected_version);

void write_json_atomic(const std::filesystem::path& path, const Json& j);
Json read_json(const std::filesystem::path& path);

}  // namespace vibdiag::io
