// SPDX-License-Identifier: Apache-2.0

#include "vibdiag/io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "vibdiag/common.hpp"

namespace vibdiag::io {

namespace fs = std::filesystem;

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw DataError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw DataError("cannot rename into '" + path.string() + "'");
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

std::uint32_t crc32(std::string_view bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  const auto* p = reinterpret_cast<const Bytef*>(bytes.data());
  std::size_t left = bytes.size();
  while (left > 0) {
    const uInt n = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
    crc = ::crc32(crc, p, n);
    p += n;
    left -= n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string encode_f32le(std::span<const float> values) {
  std::string out(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
  }
  return out;
}

std::vector<float> decode_f32le(std::string_view bytes) {
  if (bytes.size() % 4 != 0) {
    throw DataError("truncated float32 payload: " + std::to_string(bytes.size()) +
                    " bytes, trailing partial value at byte offset " +
                    std::to_string(bytes.size() - bytes.size() % 4));
  }
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    }
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

void write_container(const fs::path& path, Json header, std::string_view payload) {
  header["payload_bytes"] = payload.size();
  header["crc32"] = crc32(payload);
  std::string bytes = header.dump();
  bytes.push_back('\n');
  bytes.append(payload);
  write_file_atomic(path, bytes);
}

Container read_container(const fs::path& path, std::string_view expected_format,
                         int expected_version) {
  std::string bytes = read_file(path);
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) {
    throw DataError("'" + path.string() + "': missing container header line");
  }
  Container c;
  try {
    c.header = Json::parse(bytes.substr(0, nl));
  } catch (const Json::exception& e) {
    throw DataError("'" + path.string() + "': malformed header: " + e.what());
  }
  const std::string format = c.header.value("format", std::string{});
  if (format != expected_format) {
    throw DataError("'" + path.string() + "': expected format '" + std::string(expected_format) +
                    "', found '" + format + "'");
  }
  const int version = c.header.value("version", -1);
  if (version != expected_version) {
    throw DataError("'" + path.string() + "': format version " + std::to_string(version) +
                    " is not supported (expected " + std::to_string(expected_version) + ")");
  }
  c.payload = bytes.substr(nl + 1);
  const auto declared = c.header.value("payload_bytes", std::uint64_t{0});
  if (c.payload.size() != declared) {
    throw DataError("'" + path.string() + "': payload is " + std::to_string(c.payload.size()) +
                    " bytes, header declares " + std::to_string(declared));
  }
  const auto crc = c.header.value("crc32", std::uint32_t{0});
  if (crc32(c.payload) != crc) {
    throw DataError("'" + path.string() + "': payload checksum mismatch");
  }
  return c;
}

void write_json_atomic(const fs::path& path, const Json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

Json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::exception& e) {
    throw DataError("'" + path.string() + "': invalid JSON: " + e.what());
  }
}

}  // namespace vibdiag::io
