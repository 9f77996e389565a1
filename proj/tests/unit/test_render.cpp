// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <fstream>

#include "support/tempdir.hpp"
#include "vibdiag/io.hpp"
#include "vibdiag/render.hpp"
#include "vibdiag/siggen.hpp"

using namespace vibdiag;

namespace {

std::size_t occurrences(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

spectro::Spectrogram sample_spectrogram(double duration_s) {
  const auto rig = siggen::default_rig();
  return spectro::stft(siggen::generate_signal(rig.components[0], rig, Health::damaged, duration_s, 4), {});
}

const char* kScores =
    "partition,index,signed_score,s,mean_path_length,anomalous\n"
    "train_healthy,0,0.1,0.4,9,0\n"
    "test_healthy,0,0.05,0.45,8.5,0\n"
    "test_damaged,0,-0.2,0.7,3,1\n"
    "test_damaged,1,-0.3,0.8,2,1\n";

}  // namespace

TEST_CASE("spectrogram heatmaps carry labelled axes", "[render]") {
  const auto spec = sample_spectrogram(2.0);
  const auto h = render::heatmap_of(spec);
  REQUIRE(h.panels.size() == 1);
  CHECK(h.panels[0].frames == spec.frames);
  CHECK(h.panels[0].bins == 251);
  CHECK(h.bin_spacing_hz == Catch::Approx(4.0));
  const auto svg = render::heatmap_svg(h);
  CHECK((svg.starts_with("<?xml") || svg.starts_with("<svg")));
  CHECK(svg.find("Time (s)") != std::string::npos);
  CHECK(svg.find("Frequency (Hz)") != std::string::npos);
  const auto csv = render::heatmap_csv(h);
  CHECK(csv.starts_with("panel,time_s,freq_hz,value\n"));
  CHECK(occurrences(csv, "\n") == 1 + spec.frames * spec.bins);
}

TEST_CASE("long spectrograms are block-averaged to the frame budget", "[render]") {
  const auto spec = sample_spectrogram(10.0);  // 196 frames
  const auto h = render::heatmap_of(spec, 50);
  REQUIRE(h.panels[0].frames <= 50);
  const std::size_t block = (spec.frames + 49) / 50;
  double mean = 0.0;
  for (std::size_t f = 0; f < block; ++f) mean += spec.at(f, 10);
  mean /= static_cast<double>(block);
  CHECK(h.panels[0].values[10] == Catch::Approx(mean));
  CHECK(h.frame_step_s == Catch::Approx(block * 0.05));
}

TEST_CASE("segments render one panel per channel", "[render]") {
  const auto rig = siggen::default_rig();
  std::vector<spectro::SpectrogramSegment> parts;
  for (std::size_t c = 0; c < kComponentCount; ++c) {
    const auto ts = siggen::generate_signal(rig.components[c], rig, Health::healthy, 1.0, c);
    parts.push_back(spectro::extract_segment(spectro::stft(ts, {}), 0, 16));
  }
  const auto seg = spectro::stack_channels(parts);
  const auto h = render::heatmap_of(seg);
  REQUIRE(h.panels.size() == 3);
  CHECK(h.panels[1].title.find("lss_bearing") != std::string::npos);
  CHECK(h.panels[2].values[5 * 251 + 7] == seg.at(5, 7, 2));
  CHECK(occurrences(render::heatmap_svg(h), "Frequency (Hz)") >= 1);
}

TEST_CASE("score strips show three partitions around zero", "[render]") {
  const auto rows = render::parse_scores_csv(kScores, "scores.csv");
  REQUIRE(rows.size() == 4);
  CHECK(rows[2].anomalous);
  CHECK(rows[3].signed_score == -0.3);
  const auto svg = render::score_strip_svg(rows);
  CHECK(occurrences(svg, "Training (healthy)") == 1);
  CHECK(occurrences(svg, "Test (healthy)") == 1);
  CHECK(occurrences(svg, "Test (damaged)") == 1);
  CHECK(svg.find("stroke-dasharray") != std::string::npos);
  CHECK(render::score_strip_csv(rows).find("test_damaged") != std::string::npos);

  CHECK_THROWS_AS(render::parse_scores_csv("partition,index,signed_score,s,mean_path_length,anomalous\n", "x"),
                  DataError);
  CHECK_THROWS_AS(render::parse_scores_csv("a,b\n1,2\n", "x"), DataError);
  CHECK_THROWS_AS(
      render::parse_scores_csv("partition,index,signed_score,s,mean_path_length,anomalous\nbogus,0,1,1,1,0\n", "x"),
      DataError);
}

TEST_CASE("artifacts are recognised by content", "[render]") {
  testing::TempDir dir;
  spectro::save_spectrogram(sample_spectrogram(1.0), dir / "a.spec");
  io::write_file_atomic(dir / "s.csv", kScores);
  io::write_file_atomic(dir / "junk.bin", "hello\n");
  CHECK(render::detect_artifact(dir / "a.spec") == render::ArtifactKind::spectrogram);
  CHECK(render::detect_artifact(dir / "s.csv") == render::ArtifactKind::scores);
  CHECK_THROWS_AS(render::detect_artifact(dir / "junk.bin"), DataError);

  const auto written = render::render_artifact(dir / "s.csv", dir / "strip.svg");
  CHECK(std::filesystem::exists(dir / "strip.svg"));
  CHECK(std::filesystem::exists(dir / "strip.csv"));
  CHECK(written.size() == 2);
}
