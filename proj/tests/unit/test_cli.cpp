// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <sstream>

#include "support/tempdir.hpp"
#include "vibdiag/cli.hpp"
#include "vibdiag/io.hpp"

using namespace vibdiag;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

// Small enough for a unit test, large enough to train both stages.
const char* kSmallConfig = R"({
  "seed": 5,
  "recording_s": 4,
  "dataset": {"total": 80},
  "stage1": {"train_healthy": 40, "test_healthy": 10, "test_damaged": 10, "forest": {"trees": 20}},
  "train": {"epochs": 2, "batch_size": 16}
})";

}  // namespace

TEST_CASE("usage errors exit with code 1", "[cli]") {
  auto r = run({"frobnicate"});
  CHECK(r.code == 1);
  CHECK(r.err.find("error: usage:") != std::string::npos);
  r = run({"demo", "--no-such-flag"});
  CHECK(r.code == 1);
  r = run({});
  CHECK(r.code == 1);
  r = run({"sweep", "--dimension", "hop", "--values", "1,2"});
  CHECK(r.code == 1);
}

TEST_CASE("help and version exit with code 0", "[cli]") {
  auto r = run({"--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("demo") != std::string::npos);
  r = run({"--version"});
  CHECK(r.code == 0);
  CHECK_FALSE(r.out.empty());
}

TEST_CASE("config errors exit with code 2", "[cli]") {
  testing::TempDir dir;
  io::write_file_atomic(dir / "bad.json", R"({"seed": 1, "stft": {"windw_s": 0.5}})");
  auto r = run({"--config", (dir / "bad.json").string(), "generate", "--out-dir", (dir / "sig").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("error: config:") != std::string::npos);
  CHECK(r.err.find("windw_s") != std::string::npos);

  io::write_file_atomic(dir / "broken.json", "{ not json");
  r = run({"--config", (dir / "broken.json").string(), "demo"});
  CHECK(r.code == 2);

  r = run({"sweep", "--dimension", "window_s", "--values", "0.25,1/60", "--out-dir", (dir / "sw").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("window_s") != std::string::npos);
}

TEST_CASE("evaluate reports a length mismatch as a data error", "[cli]") {
  testing::TempDir dir;
  io::write_file_atomic(dir / "p.csv",
                        "index,p_ring_gear,p_lss_bearing,p_hss_bearing,ring_gear,lss_bearing,hss_bearing\n"
                        "0,0.9,0.1,0.1,1,0,0\n1,0.9,0.1,0.1,1,0,0\n");
  io::write_file_atomic(dir / "t.csv", "index,ring_gear,lss_bearing,hss_bearing\n0,1,0,0\n");
  const auto r = run({"evaluate", "--predictions", (dir / "p.csv").string(), "--truth", (dir / "t.csv").string(),
                      "--out", (dir / "m.csv").string()});
  CHECK(r.code == 3);
  CHECK(r.err.find("error: data:") != std::string::npos);
  CHECK(r.err.find("length mismatch") != std::string::npos);

  io::write_file_atomic(dir / "t2.csv", "index,ring_gear,lss_bearing,hss_bearing\n0,1,0,0\n1,0,0,0\n");
  const auto ok = run({"evaluate", "--predictions", (dir / "p.csv").string(), "--truth", (dir / "t2.csv").string(),
                       "--out", (dir / "m.csv").string()});
  CHECK(ok.code == 0);
  const auto metrics = io::read_file(dir / "m.csv");
  CHECK(metrics.find("subset,,,,,,,0.500000") != std::string::npos);
}

TEST_CASE("the resolution table needs no pipeline run", "[cli]") {
  testing::TempDir dir;
  const auto r = run({"-q", "sweep", "--dimension", "window_s", "--values", "1/60,0.25,1", "--table-only", "--out-dir",
                      (dir / "sw").string()});
  REQUIRE(r.code == 0);
  const auto csv = io::read_file(dir / "sw" / "resolution.csv");
  CHECK(csv.find("\n0.0166666667,60,3600,20\n") != std::string::npos);
  CHECK(csv.find("\n1,1,60,20\n") != std::string::npos);
}

TEST_CASE("the demo is deterministic end to end", "[cli]") {
  testing::TempDir dir;
  io::write_file_atomic(dir / "small.json", kSmallConfig);
  const auto cfg = (dir / "small.json").string();
  const auto a = run({"-q", "--config", cfg, "demo", "--out-dir", (dir / "a").string()});
  INFO(a.err);
  REQUIRE(a.code == 0);
  const auto b = run({"-q", "--config", cfg, "demo", "--out-dir", (dir / "b").string()});
  REQUIRE(b.code == 0);
  const auto ma = io::read_file(dir / "a" / "reports" / "metrics.csv");
  CHECK(ma == io::read_file(dir / "b" / "reports" / "metrics.csv"));
  CHECK(ma.find("stage1_anomaly") != std::string::npos);
  CHECK(io::read_file(dir / "a" / "reports" / "scores.csv") == io::read_file(dir / "b" / "reports" / "scores.csv"));
  CHECK(std::filesystem::exists(dir / "a" / "models" / "manifest.json"));
  CHECK(std::filesystem::exists(dir / "a" / "reports" / "score_strip.svg"));
  CHECK(io::read_file(dir / "a" / "reports" / "scores.csv").starts_with("partition,index,signed_score,s,"));
  CHECK(std::filesystem::exists(dir / "a" / "reports" / "report.json"));

  const auto other = run({"-q", "--config", cfg, "--seed", "6", "demo", "--out-dir", (dir / "c").string()});
  REQUIRE(other.code == 0);
  CHECK(io::read_file(dir / "c" / "reports" / "scores.csv") != io::read_file(dir / "a" / "reports" / "scores.csv"));
}

TEST_CASE("the step-by-step commands chain through files", "[cli]") {
  testing::TempDir dir;
  io::write_file_atomic(dir / "small.json", kSmallConfig);
  io::write_file_atomic(dir / "paths.json", std::string(R"({"paths": {"data_dir": ")") + (dir / "data").string() +
                                                R"(", "model_dir": ")" + (dir / "models").string() +
                                                R"(", "report_dir": ")" + (dir / "reports").string() + "\"}}");
  const auto cfg = nlohmann::json::parse(io::read_file(dir / "small.json"));
  auto merged = cfg;
  merged.update(nlohmann::json::parse(io::read_file(dir / "paths.json")));
  io::write_file_atomic(dir / "run.json", merged.dump());
  const std::string c = (dir / "run.json").string();
  for (std::vector<std::string> step : {std::vector<std::string>{"generate"},
                                        {"spectrogram"},
                                        {"build-dataset"},
                                        {"train-stage2"},
                                        {"train-stage1"},
                                        {"detect"},
                                        {"classify"}}) {
    step.insert(step.begin(), {"-q", "--config", c});
    const auto r = run(step);
    INFO(step[3] << ": " << r.err);
    REQUIRE(r.code == 0);
  }
  const auto r = run({"-q", "--config", c, "evaluate", "--predictions", (dir / "reports" / "predictions.csv").string(),
                      "--truth", (dir / "reports" / "truth.csv").string(), "--scores",
                      (dir / "reports" / "scores.csv").string()});
  REQUIRE(r.code == 0);
  CHECK(std::filesystem::exists(dir / "reports" / "metrics.csv"));
  CHECK(std::filesystem::exists(dir / "reports" / "history.csv"));
  const auto clash = run({"-q", "render", "--input", (dir / "reports" / "scores.csv").string(), "--out",
                          (dir / "reports" / "scores.svg").string()});
  CHECK(clash.code == 1);
  const auto ren = run({"-q", "render", "--input", (dir / "reports" / "scores.csv").string(), "--out",
                        (dir / "reports" / "strip.svg").string()});
  CHECK(ren.code == 0);
  CHECK(io::read_file(dir / "reports" / "scores.csv").starts_with("partition,index,signed_score,s,"));
}
