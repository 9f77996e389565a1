// SPDX-License-Identifier: Apache-2.0

#include "vibdiag/iforest.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "vibdiag/common.hpp"
#include "vibdiag/io.hpp"

namespace vibdiag::iforest {

namespace {

constexpr double kEulerGamma = std::numbers::egamma;
// Upper-tail sample used when contamination * n < 1.
constexpr std::size_t kTailMin = 10;
constexpr double kTailFraction = 0.01;
constexpr int kRejectionTries = 32;

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

std::size_t height_limit_for(std::size_t psi) {
  return static_cast<std::size_t>(std::ceil(std::log2(static_cast<double>(psi))));
}

std::uint64_t tree_seed(std::uint64_t forest_seed, std::size_t t) {
  return derive_seed(forest_seed, "iforest/tree/" + std::to_string(t));
}

void check_params(const ForestParams& p) {
  if (p.trees < 1) throw ConfigError("forest.trees must be >= 1");
  if (p.subsample < 2) throw ConfigError("forest.subsample must be >= 2");
  if (!(p.contamination > 0.0 && p.contamination < 0.5)) {
    throw ConfigError("forest.contamination must lie in (0, 0.5)");
  }
}

}  // namespace

double c_factor(std::size_t n) {
  if (n <= 1) return 0.0;
  const double nd = static_cast<double>(n);
  return 2.0 * (std::log(nd - 1.0) + kEulerGamma) - 2.0 * (nd - 1.0) / nd;
}

void FeatureMatrix::append(std::span<const float> v) {
  if (rows == 0 && cols == 0) cols = v.size();
  if (v.size() != cols) {
    throw DataError("feature vector of length " + std::to_string(v.size()) + " in a matrix of width " +
                    std::to_string(cols));
  }
  values.insert(values.end(), v.begin(), v.end());
  ++rows;
}

IsolationTree build_tree(const FeatureMatrix& data, std::span<const std::size_t> sample,
                         std::size_t height_limit, std::mt19937_64& rng) {
  if (sample.empty()) throw DataError("build_tree: empty sample");
  if (data.cols == 0) throw DataError("build_tree: zero-width features");
  IsolationTree tree;
  tree.height_limit = height_limit;

  struct Pending {
    std::size_t node;
    std::vector<std::size_t> members;
  };
  auto add_node = [&tree](std::size_t size, std::size_t depth) {
    tree.feature.push_back(-1);
    tree.split.push_back(0.0);
    tree.left.push_back(-1);
    tree.right.push_back(-1);
    tree.size.push_back(static_cast<std::uint32_t>(size));
    tree.depth.push_back(static_cast<std::uint32_t>(depth));
    return tree.feature.size() - 1;
  };
  auto range_of = [&data](const std::vector<std::size_t>& m, std::size_t f) {
    float lo = data.values[m[0] * data.cols + f];
    float hi = lo;
    for (std::size_t i : m) {
      const float v = data.values[i * data.cols + f];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    return std::pair<float, float>{lo, hi};
  };

  std::vector<Pending> stack;
  stack.push_back({add_node(sample.size(), 0), {sample.begin(), sample.end()}});
  while (!stack.empty()) {
    Pending cur = std::move(stack.back());
    stack.pop_back();
    const std::size_t depth = tree.depth[cur.node];
    if (cur.members.size() <= 1 || depth >= height_limit) continue;

    // Uniform over features with a nonzero range: rejection sampling, with a
    // full scan when the sampled features keep coming up flat.
    std::int64_t feat = -1;
    std::pair<float, float> range{};
    for (int attempt = 0; attempt < kRejectionTries && feat < 0; ++attempt) {
      const std::size_t f = uniform_index(rng, data.cols);
      range = range_of(cur.members, f);
      if (range.second > range.first) feat = static_cast<std::int64_t>(f);
    }
    if (feat < 0) {
      std::vector<std::size_t> candidates;
      for (std::size_t f = 0; f < data.cols; ++f) {
        const auto r = range_of(cur.members, f);
        if (r.second > r.first) candidates.push_back(f);
      }
      if (candidates.empty()) continue;  // all points identical: leaf
      feat = static_cast<std::int64_t>(candidates[uniform_index(rng, candidates.size())]);
      range = range_of(cur.members, static_cast<std::size_t>(feat));
    }

    const double lo = range.first, hi = range.second;
    double split = lo;
    while (!(split > lo && split < hi)) split = lo + uniform01(rng) * (hi - lo);

    std::vector<std::size_t> lm, rm;
    for (std::size_t i : cur.members) {
      (static_cast<double>(data.values[i * data.cols + static_cast<std::size_t>(feat)]) < split ? lm : rm)
          .push_back(i);
    }
    const std::size_t l = add_node(lm.size(), depth + 1);
    const std::size_t r = add_node(rm.size(), depth + 1);
    tree.feature[cur.node] = static_cast<std::int32_t>(feat);
    tree.split[cur.node] = split;
    tree.left[cur.node] = static_cast<std::int32_t>(l);
    tree.right[cur.node] = static_cast<std::int32_t>(r);
    stack.push_back({r, std::move(rm)});
    stack.push_back({l, std::move(lm)});
  }
  return tree;
}

double path_length(const IsolationTree& tree, std::span<const float> x) {
  if (tree.node_count() == 0) throw DataError("path_length: empty tree");
  std::size_t node = 0;
  std::size_t edges = 0;
  while (!tree.is_leaf(node)) {
    const auto f = static_cast<std::size_t>(tree.feature[node]);
    if (f >= x.size()) {
      throw DataError("path_length: feature index " + std::to_string(f) + " outside a vector of length " +
                      std::to_string(x.size()));
    }
    node = static_cast<std::size_t>(static_cast<double>(x[f]) < tree.split[node] ? tree.left[node]
                                                                                 : tree.right[node]);
    ++edges;
  }
  return static_cast<double>(edges) + c_factor(tree.size[node]);
}

nlohmann::json to_json(const ForestParams& p) {
  return {{"trees", p.trees},
          {"subsample", p.subsample},
          {"contamination", p.contamination},
          {"seed", p.seed}};
}

ForestParams forest_params_from_json(const nlohmann::json& j, ForestParams base) {
  if (!j.is_object()) throw ConfigError("forest: expected an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "trees") base.trees = value.get<std::size_t>();
      else if (key == "subsample") base.subsample = value.get<std::size_t>();
      else if (key == "contamination") base.contamination = value.get<double>();
      else if (key == "seed") base.seed = value.get<std::uint64_t>();
      else throw ConfigError("forest." + key + ": unknown key");
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("forest." + key + ": wrong type");
    }
  }
  check_params(base);
  return base;
}

std::vector<std::size_t> draw_subsample(std::size_t n, std::size_t psi, std::uint64_t forest_seed,
                                        std::size_t tree_index) {
  std::mt19937_64 rng(derive_seed(forest_seed, "iforest/subsample/" + std::to_string(tree_index)));
  std::vector<std::size_t> out;
  out.reserve(psi);
  if (psi <= n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < psi; ++i) {
      const std::size_t j = i + uniform_index(rng, n - i);
      std::swap(idx[i], idx[j]);
      out.push_back(idx[i]);
    }
  } else {
    for (std::size_t i = 0; i < psi; ++i) out.push_back(uniform_index(rng, n));
  }
  return out;
}

IsolationForest fit_with_subsamples(const FeatureMatrix& data, const ForestParams& params,
                                    const std::vector<std::vector<std::size_t>>& subsamples) {
  check_params(params);
  if (data.rows < 2) {
    throw DataError("forest fit needs at least 2 training vectors, got " + std::to_string(data.rows));
  }
  if (subsamples.size() != params.trees) {
    throw DataError("forest fit: " + std::to_string(subsamples.size()) + " subsamples for " +
                    std::to_string(params.trees) + " trees");
  }
  bool any_spread = false;
  for (std::size_t f = 0; f < data.cols && !any_spread; ++f) {
    const float first = data.values[f];
    for (std::size_t i = 1; i < data.rows; ++i) {
      if (data.values[i * data.cols + f] != first) {
        any_spread = true;
        break;
      }
    }
  }
  if (!any_spread) {
    throw DataError("forest fit: every training feature is constant, no split possible on any feature");
  }

  IsolationForest forest;
  forest.params = params;
  forest.psi = subsamples.front().size();
  forest.dims = data.cols;
  forest.training_size = data.rows;
  const std::size_t limit = height_limit_for(forest.psi);
  forest.trees.reserve(params.trees);
  for (std::size_t t = 0; t < params.trees; ++t) {
    if (subsamples[t].size() != forest.psi) throw DataError("forest fit: unequal subsample sizes");
    for (std::size_t i : subsamples[t]) {
      if (i >= data.rows) throw DataError("forest fit: subsample index out of range");
    }
    std::mt19937_64 rng(tree_seed(params.seed, t));
    forest.trees.push_back(build_tree(data, subsamples[t], limit, rng));
  }

  std::vector<double> s(data.rows);
  for (std::size_t i = 0; i < data.rows; ++i) {
    s[i] = std::exp2(-mean_path_length(forest, data.row(i)) / c_factor(forest.psi));
  }
  forest.offset = threshold_offset(s, params.contamination);
  std::vector<double> sorted = s;
  std::sort(sorted.begin(), sorted.end());
  forest.train_s_max = sorted.back();
  forest.train_s_median = sorted[sorted.size() / 2];
  return forest;
}

IsolationForest fit(const FeatureMatrix& data, const ForestParams& params) {
  check_params(params);
  if (data.rows < 2) {
    throw DataError("forest fit needs at least 2 training vectors, got " + std::to_string(data.rows));
  }
  const std::size_t psi = std::min(params.subsample, data.rows);
  std::vector<std::vector<std::size_t>> subsamples;
  subsamples.reserve(params.trees);
  for (std::size_t t = 0; t < params.trees; ++t) {
    subsamples.push_back(draw_subsample(data.rows, psi, params.seed, t));
  }
  return fit_with_subsamples(data, params, subsamples);
}

double threshold_offset(std::span<const double> training_s, double contamination) {
  if (training_s.empty()) throw DataError("threshold: no training scores");
  std::vector<double> desc(training_s.begin(), training_s.end());
  std::sort(desc.begin(), desc.end(), std::greater<>());
  const auto k = static_cast<std::size_t>(std::floor(contamination * static_cast<double>(desc.size())));
  if (k >= 1 && k < desc.size()) return 0.5 * (desc[k - 1] + desc[k]);
  const double max_s = desc.front();
  if (desc.size() < 2) return max_s;
  // Exponential tail above the (m+1)-th largest score, extrapolated to the
  // 1 - contamination quantile.
  const std::size_t n = desc.size();
  const std::size_t m = std::min(n - 1, std::max<std::size_t>(
                                            kTailMin, static_cast<std::size_t>(std::ceil(kTailFraction * static_cast<double>(n)))));
  const double u = desc[m];
  double excess = 0.0;
  for (std::size_t i = 0; i < m; ++i) excess += desc[i] - u;
  const double beta = excess / static_cast<double>(m);
  if (!(beta > 0.0)) return max_s;
  const double q = u + beta * std::log(static_cast<double>(m) / (static_cast<double>(n) * contamination));
  return std::max(q, max_s);
}

double mean_path_length(const IsolationForest& forest, std::span<const float> x) {
  if (!forest.fitted()) throw DataError("scoring an unfitted forest");
  if (x.size() != forest.dims) {
    throw DataError("feature vector of length " + std::to_string(x.size()) +
                    " does not match the forest's " + std::to_string(forest.dims));
  }
  double sum = 0.0;
  for (const auto& t : forest.trees) sum += path_length(t, x);
  return sum / static_cast<double>(forest.trees.size());
}

AnomalyScore score(const IsolationForest& forest, std::span<const float> x) {
  AnomalyScore a;
  a.mean_path_length = mean_path_length(forest, x);
  a.s = std::exp2(-a.mean_path_length / c_factor(forest.psi));
  a.signed_score = forest.offset - a.s;
  return a;
}

std::vector<AnomalyScore> score_batch(const IsolationForest& forest, const FeatureMatrix& data) {
  std::vector<AnomalyScore> out;
  out.reserve(data.rows);
  for (std::size_t i = 0; i < data.rows; ++i) out.push_back(score(forest, data.row(i)));
  return out;
}

nlohmann::json to_json(const IsolationForest& forest) {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& t : forest.trees) {
    trees.push_back({{"height_limit", t.height_limit},
                     {"feature", t.feature},
                     {"split", t.split},
                     {"left", t.left},
                     {"right", t.right},
                     {"size", t.size},
                     {"depth", t.depth}});
  }
  return {{"format", "vibdiag.iforest"},
          {"version", kForestVersion},
          {"params", to_json(forest.params)},
          {"psi", forest.psi},
          {"dims", forest.dims},
          {"training_size", forest.training_size},
          {"offset", forest.offset},
          {"train_s_max", forest.train_s_max},
          {"train_s_median", forest.train_s_median},
          {"trees", trees}};
}

IsolationForest forest_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "vibdiag.iforest") {
      throw DataError("forest: unexpected format '" + j.at("format").get<std::string>() + "'");
    }
    const int version = j.at("version").get<int>();
    if (version != kForestVersion) {
      throw DataError("forest: version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kForestVersion) + ")");
    }
    IsolationForest f;
    f.params = forest_params_from_json(j.at("params"));
    f.psi = j.at("psi").get<std::size_t>();
    f.dims = j.at("dims").get<std::size_t>();
    f.training_size = j.at("training_size").get<std::size_t>();
    f.offset = j.at("offset").get<double>();
    f.train_s_max = j.at("train_s_max").get<double>();
    f.train_s_median = j.at("train_s_median").get<double>();
    for (const auto& tj : j.at("trees")) {
      IsolationTree t;
      t.height_limit = tj.at("height_limit").get<std::size_t>();
      t.feature = tj.at("feature").get<std::vector<std::int32_t>>();
      t.split = tj.at("split").get<std::vector<double>>();
      t.left = tj.at("left").get<std::vector<std::int32_t>>();
      t.right = tj.at("right").get<std::vector<std::int32_t>>();
      t.size = tj.at("size").get<std::vector<std::uint32_t>>();
      t.depth = tj.at("depth").get<std::vector<std::uint32_t>>();
      const std::size_t n = t.feature.size();
      if (n == 0 || t.split.size() != n || t.left.size() != n || t.right.size() != n ||
          t.size.size() != n || t.depth.size() != n) {
        throw DataError("forest: tree node arrays have inconsistent lengths");
      }
      for (std::size_t k = 0; k < n; ++k) {
        if (t.feature[k] >= 0) {
          const auto bad = [n](std::int32_t c) { return c <= 0 || static_cast<std::size_t>(c) >= n; };
          if (bad(t.left[k]) || bad(t.right[k]) || static_cast<std::size_t>(t.feature[k]) >= f.dims) {
            throw DataError("forest: tree node " + std::to_string(k) + " is malformed");
          }
        }
      }
      f.trees.push_back(std::move(t));
    }
    if (f.trees.size() != f.params.trees) {
      throw DataError("forest: holds " + std::to_string(f.trees.size()) + " trees, params say " +
                      std::to_string(f.params.trees));
    }
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("forest: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("forest: ") + e.what());
  }
}

void save_forest(const IsolationForest& forest, const std::filesystem::path& path) {
  // Compact: a pretty-printed forest is dominated by whitespace.
  io::write_file_atomic(path, to_json(forest).dump() + "\n");
}

IsolationForest load_forest(const std::filesystem::path& path) {
  try {
    return forest_from_json(io::read_json(path));
  } catch (const DataError& e) {
    throw DataError("'" + path.string() + "': " + e.what());
  }
}

}  // namespace vibdiag::iforest
