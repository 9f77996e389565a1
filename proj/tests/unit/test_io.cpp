// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cstring>
#include <fstream>

#include "support/tempdir.hpp"
#include "vibdiag/common.hpp"
#include "vibdiag/io.hpp"

using namespace vibdiag;

TEST_CASE("crc32 check value", "[io]") {
  CHECK(io::crc32("123456789") == 0xCBF43926u);
  CHECK(io::crc32("") == 0u);
}

TEST_CASE("float32 little-endian encoding is bit exact", "[io]") {
  const std::vector<float> v = {0.0f, -0.0f, 1.0f, -3.5f, 1e-38f, 3.4e38f, 0.1f};
  const std::string bytes = io::encode_f32le(v);
  REQUIRE(bytes.size() == v.size() * 4);
  // 1.0f is 0x3F800000, stored low byte first.
  CHECK(static_cast<unsigned char>(bytes[8]) == 0x00);
  CHECK(static_cast<unsigned char>(bytes[11]) == 0x3F);
  const auto back = io::decode_f32le(bytes);
  REQUIRE(back.size() == v.size());
  CHECK(std::memcmp(back.data(), v.data(), v.size() * 4) == 0);
  CHECK_THROWS_AS(io::decode_f32le("abc"), DataError);
}

TEST_CASE("containers round trip and reject damage", "[io]") {
  testing::TempDir dir("io");
  const auto path = dir / "c.bin";
  io::write_container(path, {{"format", "demo"}, {"version", 2}, {"shape", {2, 2}}}, io::encode_f32le(std::vector<float>{1, 2, 3, 4}));
  CHECK_FALSE(std::filesystem::exists(path.string() + ".tmp"));

  const auto c = io::read_container(path, "demo", 2);
  CHECK(c.header.at("shape") == nlohmann::json({2, 2}));
  CHECK(io::decode_f32le(c.payload) == std::vector<float>{1, 2, 3, 4});

  CHECK_THROWS_AS(io::read_container(path, "other", 2), DataError);
  CHECK_THROWS_AS(io::read_container(path, "demo", 3), DataError);

  // Truncate the payload.
  std::string bytes = io::read_file(path);
  io::write_file_atomic(path, bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(io::read_container(path, "demo", 2), DataError);

  // Same length, one flipped payload byte.
  bytes.back() ^= 0x5A;
  io::write_file_atomic(path, bytes);
  CHECK_THROWS_WITH(io::read_container(path, "demo", 2), Catch::Matchers::ContainsSubstring("checksum"));
}

TEST_CASE("json files round trip; missing files are data errors", "[io]") {
  testing::TempDir dir("io");
  io::write_json_atomic(dir / "a" / "b.json", {{"x", 1.5}});
  CHECK(io::read_json(dir / "a" / "b.json").at("x") == 1.5);
  CHECK_THROWS_AS(io::read_file(dir / "missing"), DataError);
  io::write_file_atomic(dir / "bad.json", "{not json");
  CHECK_THROWS_AS(io::read_json(dir / "bad.json"), DataError);
}
