// SPDX-License-Identifier: Apache-2.0

#include "vibdiag/diagnose.hpp"

#include <cstdio>

#include "vibdiag/io.hpp"

namespace vibdiag::diagnose {

namespace {

using spectro::Labels;
using spectro::SegmentSet;
using spectro::SpectrogramSegment;

std::string shape_of(const spectro::SegmentLayout& l) {
  return std::to_string(l.frames) + "x" + std::to_string(l.bins) + "x" + std::to_string(l.channels);
}

void check_fingerprint(const Stage1Model& model, const SpectrogramSegment& seg) {
  const std::string fp = seg.layout.fingerprint();
  if (fp != model.fingerprint) {
    throw DataError("preprocessing fingerprint mismatch: segment " + fp + " (" + shape_of(seg.layout) +
                    "), model trained on " + model.fingerprint + " (" + shape_of(model.layout) + ")");
  }
}

iforest::FeatureMatrix features_of(const nnet::CnnModel<float>& extractor, const SegmentSet& set) {
  iforest::FeatureMatrix m;
  for (std::size_t i = 0; i < set.size(); ++i) {
    m.append(nnet::extract_features<float>(extractor, nnet::to_grid<float>(set.at(i))));
  }
  return m;
}

SegmentSet channel_view(const SegmentSet& set, std::size_t c) {
  std::vector<SpectrogramSegment> parts;
  parts.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) parts.push_back(select_channel(set.at(i), c));
  return SegmentSet(std::move(parts));
}

void check_matches(const nnet::Architecture& arch, const spectro::SegmentLayout& l, const char* what) {
  if (arch.input_frames != l.frames || arch.input_bins != l.bins || arch.input_channels != l.channels) {
    throw DataError(std::string(what) + " expects " + std::to_string(arch.input_frames) + "x" +
                    std::to_string(arch.input_bins) + "x" + std::to_string(arch.input_channels) +
                    " segments, got " + shape_of(l));
  }
}

}  // namespace

std::shared_ptr<spectro::SourcePools> synthesize_pools(const siggen::RigProfile& rig,
                                                       const spectro::StftConfig& cfg,
                                                       double duration_s, std::uint64_t seed) {
  siggen::validate(rig);
  if (rig.components.size() != kComponentCount) {
    throw ConfigError("rig must define exactly " + std::to_string(kComponentCount) + " components");
  }
  auto pools = std::make_shared<spectro::SourcePools>();
  for (std::size_t c = 0; c < kComponentCount; ++c) {
    for (Health h : {Health::healthy, Health::damaged}) {
      const std::string tag = "signal/" + std::string(to_string(kComponents[c])) + "/" + std::string(to_string(h));
      const auto ts = siggen::generate_signal(rig.components[c], rig, h, duration_s, derive_seed(seed, tag));
      auto spec = std::make_shared<spectro::Spectrogram>(spectro::stft(ts, cfg));
      spec->channel = std::string(to_string(kComponents[c]));
      pools->set(kComponents[c], h, std::move(spec));
    }
  }
  return pools;
}

std::string_view to_string(ExtractorMode m) {
  return m == ExtractorMode::random_filters ? "random-filters" : "reuse-stage2";
}

ExtractorMode parse_extractor_mode(std::string_view s) {
  if (s == "random-filters") return ExtractorMode::random_filters;
  if (s == "reuse-stage2") return ExtractorMode::reuse_stage2;
  throw ConfigError("unknown extractor mode '" + std::string(s) +
                    "' (expected random-filters or reuse-stage2)");
}

std::string_view to_string(ChannelMode m) { return m == ChannelMode::joint ? "joint" : "per-channel"; }

ChannelMode parse_channel_mode(std::string_view s) {
  if (s == "joint") return ChannelMode::joint;
  if (s == "per-channel") return ChannelMode::per_channel;
  throw ConfigError("unknown channel mode '" + std::string(s) + "' (expected joint or per-channel)");
}

SpectrogramSegment select_channel(const SpectrogramSegment& seg, std::size_t c) {
  const auto& l = seg.layout;
  if (c >= l.channels) {
    throw DataError("channel " + std::to_string(c) + " requested from a " + std::to_string(l.channels) +
                    "-channel segment");
  }
  SpectrogramSegment out;
  out.layout = l;
  out.layout.channels = 1;
  out.magnitudes.resize(l.frames * l.bins);
  for (std::size_t k = 0; k < out.magnitudes.size(); ++k) out.magnitudes[k] = seg.magnitudes[k * l.channels + c];
  if (c < seg.source_offsets.size()) out.source_offsets = {seg.source_offsets[c]};
  if (c < seg.channels.size()) out.channels = {seg.channels[c]};
  if (c < seg.health.size()) out.health = {seg.health[c]};
  return out;
}

Stage1Model stage1_train(const SegmentSet& healthy, const Stage1Options& options,
                         const nnet::CnnModel<float>* stage2) {
  if (healthy.size() < 2) {
    throw DataError("stage-1 training needs at least 2 healthy segments, got " +
                    std::to_string(healthy.size()));
  }
  for (std::size_t i = 0; i < healthy.size(); ++i) {
    const Labels l = healthy.labels(i);
    for (std::size_t c = 0; c < kComponentCount; ++c) {
      if (l[c]) {
        throw DataError("stage-1 training accepts healthy segments only: segment " + std::to_string(i) +
                        " is labeled damaged for " + std::string(to_string(kComponents[c])));
      }
    }
  }
  Stage1Model model;
  model.extractor_mode = options.extractor;
  model.channel_mode = options.channels;
  model.layout = healthy.layout();
  model.fingerprint = model.layout.fingerprint();

  iforest::ForestParams fp = options.forest;
  if (options.extractor == ExtractorMode::reuse_stage2) {
    if (!stage2) throw ConfigError("extractor mode reuse-stage2 needs a trained stage-2 model");
    if (options.channels == ChannelMode::per_channel) {
      throw ConfigError("extractor mode reuse-stage2 works on stacked channels only (channel mode joint)");
    }
    check_matches(stage2->arch, model.layout, "stage-2 model");
  }

  const std::size_t groups = options.channels == ChannelMode::joint ? 1 : model.layout.channels;
  for (std::size_t g = 0; g < groups; ++g) {
    const std::string tag = options.channels == ChannelMode::joint ? "" : "/" + std::to_string(g);
    const SegmentSet view = options.channels == ChannelMode::joint ? healthy : channel_view(healthy, g);
    nnet::CnnModel<float> extractor;
    if (options.extractor == ExtractorMode::reuse_stage2) {
      extractor = *stage2;
    } else {
      nnet::Architecture arch = nnet::Architecture::extractor16(view.layout());
      arch.filters = options.filters;
      extractor = nnet::make_model<float>(arch, derive_seed(options.seed, "stage1/extractor" + tag));
      nnet::fit_batchnorm_statistics(extractor, view);
    }
    fp.seed = derive_seed(options.seed, "stage1/forest" + tag);
    model.forests.push_back(iforest::fit(features_of(extractor, view), fp));
    model.extractors.push_back(std::move(extractor));
  }
  return model;
}

Detection stage1_detect(const Stage1Model& model, const SpectrogramSegment& segment) {
  check_fingerprint(model, segment);
  if (model.forests.empty() || model.forests.size() != model.extractors.size()) {
    throw DataError("stage-1 model is not fitted");
  }
  Detection best;
  for (std::size_t g = 0; g < model.forests.size(); ++g) {
    const nnet::Grid<float> grid = model.channel_mode == ChannelMode::joint
                                       ? nnet::to_grid<float>(segment)
                                       : nnet::to_grid<float>(select_channel(segment, g));
    const auto feats = nnet::extract_features<float>(model.extractors[g], grid);
    const iforest::AnomalyScore a = iforest::score(model.forests[g], feats);
    if (g == 0 || a.signed_score < best.signed_score) {
      best.signed_score = a.signed_score;
      best.s = a.s;
      best.mean_path_length = a.mean_path_length;
    }
  }
  best.is_anomalous = best.signed_score < 0.0;
  return best;
}

std::vector<Detection> stage1_detect_set(const Stage1Model& model, const SegmentSet& set) {
  std::vector<Detection> out;
  out.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) out.push_back(stage1_detect(model, set.at(i)));
  return out;
}

Stage2Result stage2_train(const spectro::LabeledDataset& dataset, const nnet::TrainConfig& cfg,
                          const nnet::Architecture& arch, const nnet::EpochCallback& on_epoch) {
  if (dataset.train.empty()) throw DataError("stage-2 training partition is empty");
  std::array<std::array<std::size_t, 2>, kComponentCount> counts{};
  for (std::size_t i = 0; i < dataset.train.size(); ++i) {
    const Labels l = dataset.train.labels(i);
    for (std::size_t c = 0; c < kComponentCount; ++c) ++counts[c][l[c] ? 1 : 0];
  }
  for (std::size_t c = 0; c < kComponentCount; ++c) {
    if (counts[c][0] == 0 || counts[c][1] == 0) {
      throw DataError("stage-2 classification is applicable only when fault observations exist for every "
                      "component: label '" + std::string(to_string(kComponents[c])) + "' has " +
                      std::to_string(counts[c][0]) + " healthy and " + std::to_string(counts[c][1]) +
                      " damaged training instances");
    }
  }
  check_matches(arch, dataset.train.layout(), "stage-2 architecture");
  Stage2Result r;
  r.model = nnet::make_model<float>(arch, derive_seed(cfg.seed, "stage2/init"));
  r.history = nnet::train_multilabel(r.model, dataset, cfg, on_epoch);
  return r;
}

Diagnosis make_diagnosis(std::span<const float> p) {
  if (p.size() != kComponentCount) throw DataError("diagnosis needs one probability per component");
  Diagnosis d;
  for (std::size_t c = 0; c < kComponentCount; ++c) {
    d.probabilities[c] = p[c];
    d.verdicts[c] = p[c] >= kVerdictThreshold ? 1 : 0;
  }
  return d;
}

Diagnosis stage2_diagnose(const nnet::CnnModel<float>& model, const SpectrogramSegment& segment) {
  check_matches(model.arch, segment.layout, "stage-2 model");
  const std::vector<nnet::Grid<float>> one{nnet::to_grid<float>(segment)};
  return make_diagnosis(nnet::model_forward<float>(model, one, nnet::Mode::infer));
}

std::vector<Diagnosis> stage2_diagnose_set(const nnet::CnnModel<float>& model, const SegmentSet& set) {
  if (set.empty()) return {};
  check_matches(model.arch, set.layout(), "stage-2 model");
  const auto probs = nnet::predict(model, set);
  std::vector<Diagnosis> out;
  out.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    out.push_back(make_diagnosis(std::span<const float>(probs.data() + i * kComponentCount, kComponentCount)));
  }
  return out;
}

LabelMetrics finalize(LabelMetrics m) {
  const auto ratio = [&m](std::size_t num, std::size_t den) {
    if (den == 0) return m.fn == 0 ? 1.0 : 0.0;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.precision = ratio(m.tp, m.tp + m.fp);
  m.recall = ratio(m.tp, m.tp + m.fn);
  const std::size_t total = m.tp + m.fp + m.tn + m.fn;
  m.accuracy = total == 0 ? 1.0 : static_cast<double>(m.tp + m.tn) / static_cast<double>(total);
  return m;
}

Metrics evaluate(std::span<const Labels> predicted, std::span<const Labels> truth) {
  if (predicted.size() != truth.size()) {
    throw DataError("evaluate: " + std::to_string(predicted.size()) + " predictions vs " +
                    std::to_string(truth.size()) + " ground-truth rows");
  }
  if (predicted.empty()) throw DataError("evaluate: no rows");
  Metrics m;
  m.count = predicted.size();
  std::size_t exact = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    bool all = true;
    for (std::size_t c = 0; c < kComponentCount; ++c) {
      const auto p = predicted[i][c], t = truth[i][c];
      if (p > 1 || t > 1) throw DataError("evaluate: labels must be 0 or 1 (row " + std::to_string(i) + ")");
      auto& lm = m.labels[c];
      if (p && t) ++lm.tp;
      else if (p && !t) ++lm.fp;
      else if (!p && t) ++lm.fn;
      else ++lm.tn;
      all = all && p == t;
    }
    exact += all;
  }
  for (auto& lm : m.labels) lm = finalize(lm);
  m.subset_accuracy = static_cast<double>(exact) / static_cast<double>(m.count);
  return m;
}

Metrics evaluate(std::span<const Diagnosis> diagnoses, std::span<const Labels> truth) {
  std::vector<Labels> pred;
  pred.reserve(diagnoses.size());
  for (const auto& d : diagnoses) pred.push_back(d.verdicts);
  return evaluate(pred, truth);
}

LabelMetrics evaluate_binary(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth) {
  if (predicted.size() != truth.size()) {
    throw DataError("evaluate: " + std::to_string(predicted.size()) + " predictions vs " +
                    std::to_string(truth.size()) + " ground-truth rows");
  }
  LabelMetrics m;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] && truth[i]) ++m.tp;
    else if (predicted[i]) ++m.fp;
    else if (truth[i]) ++m.fn;
    else ++m.tn;
  }
  return finalize(m);
}

std::string metrics_csv_header() { return "label,tp,fp,tn,fn,precision,recall,accuracy\n"; }

std::string metrics_csv_row(std::string_view name, const LabelMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.*s,%zu,%zu,%zu,%zu,%.6f,%.6f,%.6f\n", static_cast<int>(name.size()),
                name.data(), m.tp, m.fp, m.tn, m.fn, m.precision, m.recall, m.accuracy);
  return buf;
}

nlohmann::json to_json(const LabelMetrics& m) {
  return {{"tp", m.tp},          {"fp", m.fp},         {"tn", m.tn},
          {"fn", m.fn},          {"precision", m.precision}, {"recall", m.recall},
          {"accuracy", m.accuracy}};
}

nlohmann::json to_json(const Metrics& m) {
  nlohmann::json labels = nlohmann::json::object();
  for (std::size_t c = 0; c < kComponentCount; ++c) {
    labels[std::string(to_string(kComponents[c]))] = to_json(m.labels[c]);
  }
  return {{"count", m.count}, {"subset_accuracy", m.subset_accuracy}, {"labels", labels}};
}

// ---- bundle ---------------------------------------------------------------

void save_pipeline(const Pipeline& p, const std::filesystem::path& dir) {
  std::optional<spectro::SegmentLayout> layout = p.layout;
  if (!layout && p.stage1) layout = p.stage1->layout;
  if (!layout && p.stage2) {
    throw DataError("save_pipeline: a stage-2-only bundle needs an explicit segment layout");
  }
  if (!layout) throw DataError("save_pipeline: nothing to save");
  if (p.stage1 && !(p.stage1->layout == *layout)) {
    throw DataError("save_pipeline: stage-1 model and bundle disagree on the segment layout");
  }
  std::filesystem::create_directories(dir);
  nlohmann::json files = nlohmann::json::object();
  auto record = [&](const std::string& name) {
    files[name] = io::crc32(io::read_file(dir / name));
  };

  nlohmann::json manifest = {
      {"format", "vibdiag.pipeline"},
      {"version", kPipelineVersion},
      {"fingerprint", layout->fingerprint()},
      {"layout", spectro::to_json(*layout)},
      {"metadata", p.metadata},
  };
  if (p.stage1) {
    const Stage1Model& s1 = *p.stage1;
    nlohmann::json parts = nlohmann::json::array();
    for (std::size_t g = 0; g < s1.extractors.size(); ++g) {
      const std::string ex = "stage1_extractor_" + std::to_string(g) + ".cnn";
      const std::string fo = "stage1_forest_" + std::to_string(g) + ".json";
      nnet::save_model(s1.extractors[g], dir / ex, {{"role", "stage1-extractor"}});
      iforest::save_forest(s1.forests[g], dir / fo);
      record(ex);
      record(fo);
      parts.push_back({{"extractor", ex},
                       {"forest", fo},
                       {"architecture", nnet::to_json(s1.extractors[g].arch)},
                       {"forest_params", iforest::to_json(s1.forests[g].params)},
                       {"psi", s1.forests[g].psi}});
    }
    manifest["stage1"] = {{"extractor_mode", to_string(s1.extractor_mode)},
                          {"channel_mode", to_string(s1.channel_mode)},
                          {"fingerprint", s1.fingerprint},
                          {"parts", parts}};
  }
  if (p.stage2) {
    check_matches(p.stage2->arch, *layout, "stage-2 model");
    const std::string name = "stage2_classifier.cnn";
    nnet::save_model(*p.stage2, dir / name, {{"role", "stage2-classifier"}});
    record(name);
    manifest["stage2"] = {{"file", name}, {"architecture", nnet::to_json(p.stage2->arch)}};
  }
  manifest["files"] = files;
  io::write_json_atomic(dir / "manifest.json", manifest);
}

Pipeline load_pipeline(const std::filesystem::path& dir) {
  const nlohmann::json manifest = io::read_json(dir / "manifest.json");
  const std::string where = "'" + (dir / "manifest.json").string() + "'";
  Pipeline p;
  try {
    const std::string format = manifest.at("format").get<std::string>();
    if (format != "vibdiag.pipeline") throw DataError(where + ": unexpected format '" + format + "'");
    const int version = manifest.at("version").get<int>();
    if (version != kPipelineVersion) {
      throw DataError(where + ": bundle version " + std::to_string(version) + ", this build reads " +
                      std::to_string(kPipelineVersion));
    }
    const auto& files = manifest.at("files");
    for (const auto& [name, crc] : files.items()) {
      const std::uint32_t actual = io::crc32(io::read_file(dir / name));
      if (actual != crc.get<std::uint32_t>()) {
        throw DataError(where + ": checksum mismatch for " + name + " (manifest " +
                        std::to_string(crc.get<std::uint32_t>()) + ", file " + std::to_string(actual) + ")");
      }
    }
    auto listed = [&](const std::string& name) {
      if (!files.contains(name)) throw DataError(where + ": payload " + name + " has no checksum entry");
      return dir / name;
    };
    p.layout = spectro::segment_layout_from_json(manifest.at("layout"));
    if (p.layout->fingerprint() != manifest.at("fingerprint").get<std::string>()) {
      throw DataError(where + ": fingerprint does not match the recorded layout");
    }
    p.metadata = manifest.value("metadata", nlohmann::json::object());
    if (manifest.contains("stage1")) {
      const auto& j = manifest.at("stage1");
      Stage1Model s1;
      s1.extractor_mode = parse_extractor_mode(j.at("extractor_mode").get<std::string>());
      s1.channel_mode = parse_channel_mode(j.at("channel_mode").get<std::string>());
      s1.layout = *p.layout;
      s1.fingerprint = j.at("fingerprint").get<std::string>();
      for (const auto& part : j.at("parts")) {
        s1.extractors.push_back(nnet::load_model(listed(part.at("extractor").get<std::string>())));
        s1.forests.push_back(iforest::load_forest(listed(part.at("forest").get<std::string>())));
      }
      if (s1.extractors.empty()) throw DataError(where + ": stage-1 section lists no models");
      p.stage1 = std::move(s1);
    }
    if (manifest.contains("stage2")) {
      p.stage2 = nnet::load_model(listed(manifest.at("stage2").at("file").get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(where + ": " + e.what());
  }
  return p;
}

}  // namespace vibdiag::diagnose
