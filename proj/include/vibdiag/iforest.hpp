// SPDX-License-Identifier: Apache-2.0
//
// Isolation forest over dense feature vectors.
//
// Scores follow the usual normalisation s = 2^(-E(h) / c(psi)), where E(h) is
// the mean path length over trees. The signed score reported to callers is
// offset - s: positive for normal points, negative for anomalies. The offset
// is placed from the training scores so that a `contamination` fraction of
// the training set comes out negative.

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace vibdiag::iforest {

// Average unsuccessful-search path length of a binary search tree over n
// points; c(0) = c(1) = 0.
double c_factor(std::size_t n);

// Row-major n x d matrix of float features.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0f) {}

  std::span<const float> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
  std::span<float> row(std::size_t i) { return {values.data() + i * cols, cols}; }
  void append(std::span<const float> v);
};

// Flattened binary tree. Node 0 is the root. Internal nodes have feature >= 0
// and both children set; leaves have feature == -1.
struct IsolationTree {
  std::size_t height_limit = 0;
  std::vector<std::int32_t> feature;
  std::vector<double> split;
  std::vector<std::int32_t> left;
  std::vector<std::int32_t> right;
  std::vector<std::uint32_t> size;   // training points reaching the node
  std::vector<std::uint32_t> depth;

  std::size_t node_count() const { return feature.size(); }
  bool is_leaf(std::size_t node) const { return feature[node] < 0; }
};

// Grows one tree on data rows `sample` (repeats allowed). Splits stop at a
// single point, at a node whose points are all identical, or at depth
// `height_limit`. The split feature is drawn uniformly among features with a
// nonzero range at the node; the split value is uniform strictly inside that
// range, and x goes left iff x < split.
IsolationTree build_tree(const FeatureMatrix& data, std::span<const std::size_t> sample,
                         std::size_t height_limit, std::mt19937_64& rng);

// Edges from the root to x's leaf plus c(leaf size).
double path_length(const IsolationTree& tree, std::span<const float> x);

struct ForestParams {
  std::size_t trees = 100;
  std::size_t subsample = 256;
  double contamination = 0.0001;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const ForestParams& p);
ForestParams forest_params_from_json(const nlohmann::json& j, ForestParams base = {});

struct AnomalyScore {
  double s = 0.0;              // normalised score in (0, 1]
  double signed_score = 0.0;   // offset - s; negative means anomalous
  double mean_path_length = 0.0;

  bool is_anomalous() const { return signed_score < 0.0; }
};

struct IsolationForest {
  ForestParams params;
  std::size_t psi = 0;         // effective subsample size per tree
  std::size_t dims = 0;
  std::size_t training_size = 0;
  std::vector<IsolationTree> trees;
  double offset = 0.0;
  // Training score summary used to place the offset.
  double train_s_max = 0.0;
  double train_s_median = 0.0;

  bool fitted() const { return !trees.empty(); }
};

// psi = min(subsample, n) unless the caller asks for psi > n explicitly via
// `fit_with_subsamples`. Each tree samples without replacement using a seed
// derived from params.seed and the tree index. Throws DataError for fewer
// than two rows or when no feature varies across the training set.
IsolationForest fit(const FeatureMatrix& data, const ForestParams& params);

// Same as `fit` but with caller-chosen subsample members for every tree
// (indices into `data`, repeats allowed). Tree t still draws its splits from
// the seed derived for index t.
IsolationForest fit_with_subsamples(const FeatureMatrix& data, const ForestParams& params,
                                    const std::vector<std::vector<std::size_t>>& subsamples);

// Subsample used by `fit` for tree `t`.
std::vector<std::size_t> draw_subsample(std::size_t n, std::size_t psi, std::uint64_t forest_seed,
                                        std::size_t tree_index);

double mean_path_length(const IsolationForest& forest, std::span<const float> x);
AnomalyScore score(const IsolationForest& forest, std::span<const float> x);
std::vector<AnomalyScore> score_batch(const IsolationForest& forest, const FeatureMatrix& data);

// Offset placement from training scores. With k = floor(contamination * n)
// >= 1 the offset is the midpoint between the k-th and (k+1)-th largest
// score. With k = 0 the 1 - contamination quantile lies beyond the sample:
// an exponential tail is fitted to the m = max(10, ceil(0.01 n)) largest
// scores (capped at n - 1) above u, the (m+1)-th largest, with scale beta
// equal to their mean excess over u, giving u + beta * ln(m / (n *
// contamination)). The result never falls below the training maximum, so
// no training point is flagged.
double threshold_offset(std::span<const double> training_s, double contamination);

inline constexpr int kForestVersion = 1;

nlohmann::json to_json(const IsolationForest& forest);
IsolationForest forest_from_json(const nlohmann::json& j);
void save_forest(const IsolationForest& forest, const std::filesystem::path& path);
IsolationForest load_forest(const std::filesystem::path& path);

}  // namespace vibdiag::iforest
