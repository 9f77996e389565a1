// SPDX-License-Identifier: Apache-2.0

#include "vibdiag/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <algorithm>
#include <set>
#include <sstream>

#include "vibdiag/io.hpp"

namespace vibdiag::experiment {

namespace {

using nlohmann::json;

// Walks one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown fields.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  const json* take(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string where(const char* key) const { return path_ + "." + key; }

  void count(const char* key, std::size_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<long long>() < 0)) {
        throw ConfigError(where(key) + ": expected a non-negative integer");
      }
      out = v->get<std::size_t>();
    }
  }

  void seed(const char* key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0)) {
        throw ConfigError(where(key) + ": expected a non-negative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }

  void real(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + ": expected a number");
      out = v->get<double>();
      if (!std::isfinite(out)) throw ConfigError(where(key) + ": must be finite");
    }
  }

  void boolean(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }

  template <typename Parse>
  void choice(const char* key, Parse parse) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + ": expected a string");
      try {
        parse(v->get<std::string>());
      } catch (const Error& e) {
        throw ConfigError(where(key) + ": " + e.what());
      }
    }
  }

  void path(const char* key, std::filesystem::path& out) {
    if (const json* v = take(key)) {
      if (!v->is_string() || v->get<std::string>().empty()) {
        throw ConfigError(where(key) + ": expected a non-empty path string");
      }
      out = v->get<std::string>();
    }
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(path_ + "." + item.key() + ": unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// Re-raises a nested validator's error with the config path in front.
template <typename F>
auto scoped(const std::string& prefix, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + ": " + e.what());
  }
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string g17(double v) { return fmt("%.17g", v); }

json instances_json(const spectro::SegmentSet& set) {
  json out = json::array();
  for (const auto& inst : set.instances()) {
    out.push_back({inst.labels[0], inst.labels[1], inst.labels[2], inst.offset});
  }
  return out;
}

std::vector<spectro::Instance> instances_from_json(const json& j, const std::string& what) {
  if (!j.is_array()) throw DataError(what + ": expected an array of instances");
  std::vector<spectro::Instance> out;
  out.reserve(j.size());
  for (const auto& row : j) {
    if (!row.is_array() || row.size() != 4) throw DataError(what + ": instance rows are [l0, l1, l2, offset]");
    spectro::Instance inst;
    for (std::size_t c = 0; c < kComponentCount; ++c) {
      const auto v = row[c].get<int>();
      if (v != 0 && v != 1) throw DataError(what + ": labels must be 0 or 1");
      inst.labels[c] = static_cast<std::uint8_t>(v);
    }
    inst.offset = row[3].get<std::size_t>();
    out.push_back(inst);
  }
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_real(std::string_view text, const std::string& what) {
  const std::string s(text);
  const auto slash = s.find('/');
  auto one = [&](const std::string& part) {
    char* end = nullptr;
    const double v = std::strtod(part.c_str(), &end);
    if (part.empty() || end != part.c_str() + part.size() || !std::isfinite(v)) {
      throw ConfigError(what + ": '" + s + "' is not a number");
    }
    return v;
  };
  if (slash == std::string::npos) return one(s);
  const double den = one(s.substr(slash + 1));
  if (den == 0.0) throw ConfigError(what + ": '" + s + "' divides by zero");
  return one(s.substr(0, slash)) / den;
}

}  // namespace

// ---- configuration ---------------------------------------------------------

RunConfig config_from_json(const json& j, RunConfig cfg) {
  Fields root(j, "config");
  root.seed("seed", cfg.seed);
  root.boolean("deterministic", cfg.deterministic);
  root.real("recording_s", cfg.recording_s);

  if (const json* p = root.take("paths")) {
    Fields f(*p, "config.paths");
    f.path("data_dir", cfg.paths.data_dir);
    f.path("model_dir", cfg.paths.model_dir);
    f.path("report_dir", cfg.paths.report_dir);
    f.finish();
  }
  if (const json* r = root.take("rig")) {
    Fields f(*r, "config.rig");
    for (const char* key : {"sample_rate_hz", "lss_speed_rpm", "hss_speed_rpm", "transmission_ratio", "components"}) {
      f.take(key);
    }
    f.finish();
    cfg.rig = scoped("config.rig", [&] { return siggen::rig_from_json(*r); });
  }
  if (const json* s = root.take("stft")) {
    cfg.stft = scoped("config", [&] { return spectro::stft_config_from_json(*s, cfg.stft); });
  }
  if (const json* d = root.take("dataset")) {
    Fields f(*d, "config.dataset");
    f.count("total", cfg.dataset.total);
    f.real("segment_duration_s", cfg.dataset.segment_duration_s);
    f.boolean("mix_channels", cfg.dataset.mix_channels);
    f.real("damaged_fraction", cfg.dataset.damaged_fraction);
    if (const json* r = f.take("ratios")) {
      if (!r->is_array() || r->size() != 3 || !(*r)[0].is_number() || !(*r)[1].is_number() || !(*r)[2].is_number()) {
        throw ConfigError("config.dataset.ratios: expected [train, validation, test] numbers");
      }
      cfg.dataset.ratios = {(*r)[0].get<double>(), (*r)[1].get<double>(), (*r)[2].get<double>()};
    }
    f.finish();
  }
  if (const json* s = root.take("stage1")) {
    Fields f(*s, "config.stage1");
    f.count("train_healthy", cfg.stage1.train_healthy);
    f.count("test_healthy", cfg.stage1.test_healthy);
    f.count("test_damaged", cfg.stage1.test_damaged);
    f.count("filters", cfg.stage1.filters);
    f.choice("extractor", [&](const std::string& v) { cfg.stage1.extractor = diagnose::parse_extractor_mode(v); });
    f.choice("channel_mode", [&](const std::string& v) { cfg.stage1.channels = diagnose::parse_channel_mode(v); });
    if (const json* fp = f.take("forest")) {
      if (fp->is_object() && fp->contains("seed")) {
        throw ConfigError("config.stage1.forest.seed: forest seeds derive from the master seed");
      }
      cfg.stage1.forest =
          scoped("config.stage1.forest", [&] { return iforest::forest_params_from_json(*fp, cfg.stage1.forest); });
    }
    f.finish();
  }
  if (const json* t = root.take("train")) {
    Fields f(*t, "config.train");
    f.count("epochs", cfg.train.epochs);
    f.count("batch_size", cfg.train.batch_size);
    f.real("learning_rate", cfg.train.learning_rate);
    f.boolean("shuffle", cfg.train.shuffle);
    f.finish();
  }
  if (const json* a = root.take("classifier")) {
    Fields f(*a, "config.classifier");
    f.count("filters", cfg.classifier.filters);
    f.count("hidden", cfg.classifier.hidden);
    f.real("dropout_rate", cfg.classifier.dropout_rate);
    f.choice("hidden_activation",
             [&](const std::string& v) { cfg.classifier.hidden_activation = nnet::parse_activation(v); });
    f.finish();
  }
  root.finish();
  return cfg;
}

json to_json(const RunConfig& cfg) {
  json forest = iforest::to_json(cfg.stage1.forest);
  forest.erase("seed");
  return {
      {"seed", cfg.seed},
      {"deterministic", cfg.deterministic},
      {"paths",
       {{"data_dir", cfg.paths.data_dir.string()},
        {"model_dir", cfg.paths.model_dir.string()},
        {"report_dir", cfg.paths.report_dir.string()}}},
      {"rig", siggen::to_json(cfg.rig)},
      {"recording_s", cfg.recording_s},
      {"stft", spectro::to_json(cfg.stft)},
      {"dataset",
       {{"total", cfg.dataset.total},
        {"segment_duration_s", cfg.dataset.segment_duration_s},
        {"ratios", {cfg.dataset.ratios.train, cfg.dataset.ratios.validation, cfg.dataset.ratios.test}},
        {"mix_channels", cfg.dataset.mix_channels},
        {"damaged_fraction", cfg.dataset.damaged_fraction}}},
      {"stage1",
       {{"train_healthy", cfg.stage1.train_healthy},
        {"test_healthy", cfg.stage1.test_healthy},
        {"test_damaged", cfg.stage1.test_damaged},
        {"extractor", diagnose::to_string(cfg.stage1.extractor)},
        {"channel_mode", diagnose::to_string(cfg.stage1.channels)},
        {"filters", cfg.stage1.filters},
        {"forest", forest}}},
      {"train",
       {{"epochs", cfg.train.epochs},
        {"batch_size", cfg.train.batch_size},
        {"learning_rate", cfg.train.learning_rate},
        {"shuffle", cfg.train.shuffle}}},
      {"classifier",
       {{"filters", cfg.classifier.filters},
        {"hidden", cfg.classifier.hidden},
        {"dropout_rate", cfg.classifier.dropout_rate},
        {"hidden_activation", nnet::to_string(cfg.classifier.hidden_activation)}}},
  };
}

void validate(const RunConfig& cfg) {
  scoped("config.rig", [&] { siggen::validate(cfg.rig); });
  if (cfg.rig.components.size() != kComponentCount) {
    throw ConfigError("config.rig.components: expected exactly 3 components");
  }
  const double fs = cfg.rig.sample_rate_hz;
  scoped("config", [&] { spectro::validate(cfg.stft, fs); });

  const double rec_samples = cfg.recording_s * fs;
  if (!(cfg.recording_s > 0.0) || std::abs(rec_samples - std::round(rec_samples)) > 1e-6) {
    throw ConfigError("config.recording_s: must be a positive whole number of samples");
  }
  const auto& d = cfg.dataset;
  if (!(d.segment_duration_s > 0.0)) throw ConfigError("config.dataset.segment_duration_s: must be > 0");
  if (d.segment_duration_s > cfg.recording_s) {
    throw ConfigError("config.dataset.segment_duration_s: longer than config.recording_s");
  }
  if (d.total < 3) throw ConfigError("config.dataset.total: need at least 3 instances");
  if (!(d.ratios.train > 0.0 && d.ratios.validation >= 0.0 && d.ratios.test > 0.0)) {
    throw ConfigError("config.dataset.ratios: train and test must be > 0, validation >= 0");
  }
  if (!(d.damaged_fraction > 0.0 && d.damaged_fraction < 1.0)) {
    throw ConfigError("config.dataset.damaged_fraction: must lie in (0, 1)");
  }
  if (cfg.stage1.train_healthy < 2) throw ConfigError("config.stage1.train_healthy: need at least 2");
  if (cfg.stage1.test_healthy < 1) throw ConfigError("config.stage1.test_healthy: need at least 1");
  if (cfg.stage1.test_damaged < 1) throw ConfigError("config.stage1.test_damaged: need at least 1");
  if (cfg.stage1.filters < 1) throw ConfigError("config.stage1.filters: need at least 1");
  if (cfg.stage1.extractor == diagnose::ExtractorMode::reuse_stage2 &&
      cfg.stage1.channels != diagnose::ChannelMode::joint) {
    throw ConfigError("config.stage1.channel_mode: reuse-stage2 extraction requires joint channels");
  }
  if (cfg.train.epochs < 1) throw ConfigError("config.train.epochs: need at least 1");
  if (cfg.train.batch_size < 2) throw ConfigError("config.train.batch_size: need at least 2 (batchnorm)");
  if (!(cfg.train.learning_rate > 0.0)) throw ConfigError("config.train.learning_rate: must be > 0");

  const auto layout = scoped("config.dataset.segment_duration_s", [&] { return expected_layout(cfg); });
  scoped("config.classifier", [&] { nnet::validate(classifier_architecture(cfg, layout)); });
  auto extractor = nnet::Architecture::extractor16(layout);
  extractor.filters = cfg.stage1.filters;
  if (cfg.stage1.channels == diagnose::ChannelMode::per_channel) extractor.input_channels = 1;
  scoped("config.stage1", [&] { nnet::validate(extractor); });
}

spectro::SegmentLayout expected_layout(const RunConfig& cfg) {
  spectro::SegmentLayout l;
  l.stft = cfg.stft;
  l.sample_rate_hz = cfg.rig.sample_rate_hz;
  l.frames = spectro::frames_per_segment(cfg.stft, cfg.dataset.segment_duration_s);
  l.bins = spectro::retained_bins(cfg.stft, cfg.rig.sample_rate_hz);
  l.channels = kComponentCount;
  return l;
}

nnet::Architecture classifier_architecture(const RunConfig& cfg, const spectro::SegmentLayout& layout) {
  auto a = nnet::Architecture::classifier(layout);
  a.filters = cfg.classifier.filters;
  a.hidden = cfg.classifier.hidden;
  a.dropout_rate = cfg.classifier.dropout_rate;
  a.hidden_activation = cfg.classifier.hidden_activation;
  return a;
}

nnet::TrainConfig train_config(const RunConfig& cfg) {
  nnet::TrainConfig t = cfg.train;
  t.seed = derive_seed(cfg.seed, "stage2");
  return t;
}

diagnose::Stage1Options stage1_options(const RunConfig& cfg) {
  diagnose::Stage1Options o;
  o.extractor = cfg.stage1.extractor;
  o.channels = cfg.stage1.channels;
  o.filters = cfg.stage1.filters;
  o.forest = cfg.stage1.forest;
  o.seed = derive_seed(cfg.seed, "stage1");
  return o;
}

// ---- data ------------------------------------------------------------------

std::shared_ptr<const spectro::SourcePools> synthesize(const RunConfig& cfg) {
  return diagnose::synthesize_pools(cfg.rig, cfg.stft, cfg.recording_s, derive_seed(cfg.seed, "signals"));
}

DataBundle assemble(const RunConfig& cfg, std::shared_ptr<const spectro::SourcePools> pools) {
  spectro::DatasetOptions opts;
  opts.segment_duration_s = cfg.dataset.segment_duration_s;
  opts.ratios = cfg.dataset.ratios;
  opts.mix_channels = cfg.dataset.mix_channels;
  opts.damaged_fraction = cfg.dataset.damaged_fraction;
  DataBundle b;
  b.pools = pools;
  b.labeled = spectro::assemble_dataset(pools, opts, cfg.dataset.total, derive_seed(cfg.seed, "dataset"));
  b.one_class = spectro::assemble_one_class_sets(pools, cfg.dataset.segment_duration_s, cfg.stage1.train_healthy,
                                                 cfg.stage1.test_healthy, cfg.stage1.test_damaged,
                                                 derive_seed(cfg.seed, "one-class"));
  return b;
}

void save_dataset_manifest(const DataBundle& data, const RunConfig& cfg, const std::filesystem::path& manifest,
                           const std::array<std::array<std::string, 2>, kComponentCount>& sources) {
  json src = json::object();
  for (std::size_t c = 0; c < kComponentCount; ++c) {
    src[std::string(to_string(kComponents[c]))] = {{"healthy", sources[c][0]}, {"damaged", sources[c][1]}};
  }
  const auto layout = data.labeled.train.layout();
  const auto& rep = data.labeled.report;
  json j = {
      {"format", "vibdiag.dataset"},
      {"version", 1},
      {"seed", cfg.seed},
      {"segment_duration_s", data.labeled.segment_duration_s},
      {"ratios", {data.labeled.ratios.train, data.labeled.ratios.validation, data.labeled.ratios.test}},
      {"layout", spectro::to_json(layout)},
      {"fingerprint", layout.fingerprint()},
      {"sources", src},
      {"partitions",
       {{"train", instances_json(data.labeled.train)},
        {"validation", instances_json(data.labeled.validation)},
        {"test", instances_json(data.labeled.test)},
        {kStage1Train, instances_json(data.one_class.train_healthy)},
        {kStage1TestHealthy, instances_json(data.one_class.test_healthy)},
        {kStage1TestDamaged, instances_json(data.one_class.test_damaged)}}},
      {"report",
       {{"unique_source_offsets", rep.unique_source_offsets},
        {"damaged_marginals", rep.damaged_marginals},
        {"warnings", rep.warnings}}},
  };
  io::write_json_atomic(manifest, j);
}

DataBundle load_dataset_manifest(const std::filesystem::path& manifest) {
  const json j = io::read_json(manifest);
  const std::string where = "'" + manifest.string() + "'";
  if (j.value("format", "") != "vibdiag.dataset") throw DataError(where + ": not a dataset manifest");
  if (j.value("version", 0) != 1) throw DataError(where + ": unsupported dataset manifest version");
  DataBundle b;
  try {
    auto pools = std::make_shared<spectro::SourcePools>();
    const auto base = manifest.parent_path();
    for (std::size_t c = 0; c < kComponentCount; ++c) {
      const auto& entry = j.at("sources").at(std::string(to_string(kComponents[c])));
      for (Health h : {Health::healthy, Health::damaged}) {
        const std::filesystem::path rel = entry.at(std::string(to_string(h))).get<std::string>();
        const auto path = rel.is_absolute() ? rel : base / rel;
        pools->set(kComponents[c], h, std::make_shared<spectro::Spectrogram>(spectro::load_spectrogram(path)));
      }
    }
    pools->validate();
    const auto layout = spectro::segment_layout_from_json(j.at("layout"));
    const std::string fp = j.at("fingerprint").get<std::string>();
    if (layout.fingerprint() != fp) throw DataError(where + ": layout does not match its fingerprint");
    if (!(layout.stft == pools->config()) || layout.sample_rate_hz != pools->sample_rate_hz()) {
      throw DataError(where + ": source spectrograms were built with a different STFT config");
    }
    const std::size_t frames = layout.frames;
    const std::size_t limit = pools->common_frames();
    const auto& parts = j.at("partitions");
    auto set_of = [&](const char* name) {
      auto inst = instances_from_json(parts.at(name), where + " partition " + name);
      for (const auto& i : inst) {
        if (i.offset + frames > limit) throw DataError(where + " partition " + name + ": offset beyond sources");
      }
      return spectro::SegmentSet(pools, frames, std::move(inst));
    };
    b.pools = pools;
    b.labeled.train = set_of("train");
    b.labeled.validation = set_of("validation");
    b.labeled.test = set_of("test");
    const auto r = j.at("ratios");
    b.labeled.ratios = {r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>()};
    b.labeled.segment_duration_s = j.at("segment_duration_s").get<double>();
    b.labeled.seed = j.at("seed").get<std::uint64_t>();
    const auto& rep = j.at("report");
    b.labeled.report.unique_source_offsets = rep.at("unique_source_offsets").get<std::size_t>();
    b.labeled.report.damaged_marginals = rep.at("damaged_marginals").get<std::array<double, kComponentCount>>();
    b.labeled.report.warnings = rep.at("warnings").get<std::vector<std::string>>();
    b.one_class.train_healthy = set_of(kStage1Train);
    b.one_class.test_healthy = set_of(kStage1TestHealthy);
    b.one_class.test_damaged = set_of(kStage1TestDamaged);
  } catch (const json::exception& e) {
    throw DataError(where + ": " + e.what());
  }
  return b;
}

const spectro::SegmentSet& partition(const DataBundle& data, std::string_view name) {
  if (name == "train") return data.labeled.train;
  if (name == "validation") return data.labeled.validation;
  if (name == "test") return data.labeled.test;
  if (name == kStage1Train) return data.one_class.train_healthy;
  if (name == kStage1TestHealthy) return data.one_class.test_healthy;
  if (name == kStage1TestDamaged) return data.one_class.test_damaged;
  throw UsageError("unknown partition '" + std::string(name) +
                   "' (train | validation | test | train_healthy | test_healthy | test_damaged)");
}

// ---- stages ----------------------------------------------------------------

Stage1Outcome run_stage1(const RunConfig& cfg, const DataBundle& data, const nnet::CnnModel<float>* stage2) {
  return score_stage1(diagnose::stage1_train(data.one_class.train_healthy, stage1_options(cfg), stage2), data);
}

Stage1Outcome score_stage1(diagnose::Stage1Model model, const DataBundle& data) {
  Stage1Outcome out;
  out.model = std::move(model);
  out.train = diagnose::stage1_detect_set(out.model, data.one_class.train_healthy);
  out.test_healthy = diagnose::stage1_detect_set(out.model, data.one_class.test_healthy);
  out.test_damaged = diagnose::stage1_detect_set(out.model, data.one_class.test_damaged);
  std::vector<std::uint8_t> pred, truth;
  for (const auto& d : out.test_healthy) {
    pred.push_back(d.is_anomalous);
    truth.push_back(0);
  }
  for (const auto& d : out.test_damaged) {
    pred.push_back(d.is_anomalous);
    truth.push_back(1);
  }
  out.metrics = diagnose::evaluate_binary(pred, truth);
  return out;
}

Stage2Outcome run_stage2(const RunConfig& cfg, const DataBundle& data, const nnet::EpochCallback& on_epoch) {
  Stage2Outcome out;
  const auto arch = classifier_architecture(cfg, data.labeled.train.layout());
  out.result = diagnose::stage2_train(data.labeled, train_config(cfg), arch, on_epoch);
  out.test = diagnose::stage2_diagnose_set(out.result.model, data.labeled.test);
  for (std::size_t i = 0; i < data.labeled.test.size(); ++i) out.truth.push_back(data.labeled.test.labels(i));
  out.metrics = diagnose::evaluate(out.test, out.truth);
  return out;
}

// ---- text artifacts --------------------------------------------------------

std::string scores_csv(const Stage1Outcome& o) {
  std::string out = "partition,index,signed_score,s,mean_path_length,anomalous\n";
  auto emit = [&](const char* name, const std::vector<diagnose::Detection>& ds) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      out += std::string(name) + "," + std::to_string(i) + "," + g17(ds[i].signed_score) + "," + g17(ds[i].s) +
             "," + g17(ds[i].mean_path_length) + "," + (ds[i].is_anomalous ? "1" : "0") + "\n";
    }
  };
  emit(kStage1Train, o.train);
  emit(kStage1TestHealthy, o.test_healthy);
  emit(kStage1TestDamaged, o.test_damaged);
  return out;
}

std::string predictions_csv(std::span<const diagnose::Diagnosis> diagnoses) {
  std::string out = "index";
  for (Component c : kComponents) out += ",p_" + std::string(to_string(c));
  for (Component c : kComponents) out += "," + std::string(to_string(c));
  out += "\n";
  for (std::size_t i = 0; i < diagnoses.size(); ++i) {
    out += std::to_string(i);
    for (float p : diagnoses[i].probabilities) out += "," + fmt("%.9g", p);
    for (auto v : diagnoses[i].verdicts) out += v ? ",1" : ",0";
    out += "\n";
  }
  return out;
}

std::string truth_csv(std::span<const spectro::Labels> truth) {
  std::string out = "index";
  for (Component c : kComponents) out += "," + std::string(to_string(c));
  out += "\n";
  for (std::size_t i = 0; i < truth.size(); ++i) {
    out += std::to_string(i);
    for (auto v : truth[i]) out += v ? ",1" : ",0";
    out += "\n";
  }
  return out;
}

std::vector<spectro::Labels> parse_label_csv(const std::string& text, const std::string& what, bool predictions) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError(what + ": empty file");
  const auto header = split_csv_line(line);
  std::array<std::size_t, kComponentCount> col{};
  for (std::size_t c = 0; c < kComponentCount; ++c) {
    const std::string name(to_string(kComponents[c]));
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw DataError(what + ": missing column '" + name + "' (not a " +
                      (predictions ? "predictions" : "truth") + " file)");
    }
    col[c] = static_cast<std::size_t>(it - header.begin());
  }
  std::vector<spectro::Labels> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw DataError(what + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                      " columns, got " + std::to_string(cells.size()));
    }
    spectro::Labels l{};
    for (std::size_t c = 0; c < kComponentCount; ++c) {
      const auto& v = cells[col[c]];
      if (v != "0" && v != "1") {
        throw DataError(what + ":" + std::to_string(lineno) + ": label '" + v + "' is not 0 or 1");
      }
      l[c] = v == "1";
    }
    out.push_back(l);
  }
  return out;
}

std::string metrics_csv(const diagnose::LabelMetrics* stage1, const diagnose::Metrics* stage2) {
  std::string out = diagnose::metrics_csv_header();
  if (stage1) out += diagnose::metrics_csv_row("stage1_anomaly", *stage1);
  if (stage2) {
    for (std::size_t c = 0; c < kComponentCount; ++c) {
      out += diagnose::metrics_csv_row(to_string(kComponents[c]), stage2->labels[c]);
    }
    out += "subset,,,,,,," + fmt("%.6f", stage2->subset_accuracy) + "\n";
  }
  return out;
}

std::string history_csv(const nnet::TrainHistory& history) {
  std::string out = "epoch,train_loss,validation_loss,validation_subset_accuracy";
  for (Component c : kComponents) out += ",validation_accuracy_" + std::string(to_string(c));
  out += "\n";
  for (const auto& e : history.epochs) {
    out += std::to_string(e.epoch) + "," + g17(e.train_loss) + "," + g17(e.validation_loss) + "," +
           g17(e.validation_subset_accuracy);
    for (double a : e.validation_label_accuracy) out += "," + g17(a);
    out += "\n";
  }
  return out;
}

// ---- sweeps ----------------------------------------------------------------

SweepDimension parse_sweep_dimension(std::string_view s) {
  if (s == "window_s") return SweepDimension::window_s;
  if (s == "segment_duration_s") return SweepDimension::segment_duration_s;
  if (s == "batch_size") return SweepDimension::batch_size;
  if (s == "log_amplitude") return SweepDimension::log_amplitude;
  if (s == "architecture") return SweepDimension::architecture;
  throw UsageError("unknown sweep dimension '" + std::string(s) +
                   "' (window_s | segment_duration_s | batch_size | log_amplitude | architecture)");
}

std::string_view to_string(SweepDimension d) {
  switch (d) {
    case SweepDimension::window_s: return "window_s";
    case SweepDimension::segment_duration_s: return "segment_duration_s";
    case SweepDimension::batch_size: return "batch_size";
    case SweepDimension::log_amplitude: return "log_amplitude";
    case SweepDimension::architecture: return "architecture";
  }
  return "?";
}

RunConfig apply_sweep_value(RunConfig cfg, SweepDimension dim, std::string_view value) {
  const std::string what = "sweep " + std::string(to_string(dim));
  switch (dim) {
    case SweepDimension::window_s:
      cfg.stft.window_s = parse_real(value, what);
      break;
    case SweepDimension::segment_duration_s:
      cfg.dataset.segment_duration_s = parse_real(value, what);
      break;
    case SweepDimension::batch_size: {
      const double v = parse_real(value, what);
      if (v < 1.0 || v != std::floor(v)) throw ConfigError(what + ": '" + std::string(value) + "' is not a count");
      cfg.train.batch_size = static_cast<std::size_t>(v);
      break;
    }
    case SweepDimension::log_amplitude:
      if (value == "on" || value == "true" || value == "1") cfg.stft.log_amplitude = true;
      else if (value == "off" || value == "false" || value == "0") cfg.stft.log_amplitude = false;
      else throw ConfigError(what + ": '" + std::string(value) + "' is not on/off");
      break;
    case SweepDimension::architecture: {
      std::string v(value);
      if (v.size() > 7 && v.ends_with("-filter")) v.resize(v.size() - 7);
      const double n = parse_real(v, what);
      if (n < 1.0 || n != std::floor(n)) {
        throw ConfigError(what + ": '" + std::string(value) + "' is not a filter count such as 4-filter or 16-filter");
      }
      cfg.stage1.filters = static_cast<std::size_t>(n);
      break;
    }
  }
  return cfg;
}

ResolutionRow resolution(double window_s, double hop_s) {
  if (!(window_s > 0.0) || !(hop_s > 0.0)) throw ConfigError("resolution: window and hop must be > 0");
  return {window_s, 1.0 / window_s, 60.0 / window_s, 1.0 / hop_s};
}

std::string resolution_csv(std::span<const ResolutionRow> rows) {
  std::string out = "window_s,bin_spacing_hz,frames_per_minute,hop_frames_per_second\n";
  for (const auto& r : rows) {
    out += fmt("%.9g", r.window_s) + "," + fmt("%.9g", r.bin_spacing_hz) + "," + fmt("%.9g", r.frames_per_minute) +
           "," + fmt("%.9g", r.hop_frames_per_second) + "\n";
  }
  return out;
}

std::vector<SweepRow> run_sweep(const RunConfig& base, SweepDimension dim, const std::vector<std::string>& values,
                                const std::function<void(const std::string&)>& progress) {
  if (values.size() < 2) throw ConfigError("sweep: need at least 2 values");
  std::vector<RunConfig> runs;
  for (const auto& v : values) {
    RunConfig cfg = apply_sweep_value(base, dim, v);
    cfg.seed = derive_seed(base.seed, "sweep/" + std::string(to_string(dim)) + "/" + v);
    try {
      validate(cfg);
    } catch (const ConfigError& e) {
      throw ConfigError("sweep " + std::string(to_string(dim)) + "=" + v + ": " + e.what());
    }
    runs.push_back(std::move(cfg));
  }
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (progress) progress(values[i]);
    const RunConfig& cfg = runs[i];
    const DataBundle data = assemble(cfg, synthesize(cfg));
    SweepRow row;
    row.value = values[i];
    row.resolution = resolution(cfg.stft.window_s, cfg.stft.hop_s);
    const auto layout = data.labeled.train.layout();
    row.segment_frames = layout.frames;
    row.segment_bins = layout.bins;
    row.stage1 = run_stage1(cfg, data).metrics;
    row.stage2 = run_stage2(cfg, data).metrics;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string sweep_csv(SweepDimension dim, std::span<const SweepRow> rows) {
  std::string out =
      "dimension,value,window_s,bin_spacing_hz,frames_per_minute,segment_frames,segment_bins,"
      "stage1_precision,stage1_recall";
  for (Component c : kComponents) out += "," + std::string(to_string(c)) + "_accuracy";
  out += ",subset_accuracy\n";
  for (const auto& r : rows) {
    out += std::string(to_string(dim)) + "," + r.value + "," + fmt("%.9g", r.resolution.window_s) + "," +
           fmt("%.9g", r.resolution.bin_spacing_hz) + "," + fmt("%.9g", r.resolution.frames_per_minute) + "," +
           std::to_string(r.segment_frames) + "," + std::to_string(r.segment_bins) + "," +
           fmt("%.6f", r.stage1.precision) + "," + fmt("%.6f", r.stage1.recall);
    for (const auto& l : r.stage2.labels) out += "," + fmt("%.6f", l.accuracy);
    out += "," + fmt("%.6f", r.stage2.subset_accuracy) + "\n";
  }
  return out;
}

}  // namespace vibdiag::experiment
