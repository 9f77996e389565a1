// SPDX-License-Identifier: Apache-2.0
//
// Hand-written kernels for one small CNN:
//
//   conv 3x3 (valid) -> maxpool 2x2 -> batchnorm -> ReLU -> flatten
//     -> dropout -> dense(hidden) -> [activation] -> dense(outputs) -> sigmoid
//
// The hidden activation defaults to linear. With ReLU there, four hidden
// units routinely lock into a state where the unit serving one label is
// switched off for some label combinations and never receives gradient from
// them again; ReLU remains selectable.
//
// The conv/pool/batchnorm front end doubles as the feature extractor of the
// anomaly stage. Every kernel is templated on the scalar type; float is the
// production type (checkpoints store float32 exactly) and double is used for
// finite-difference gradient checks. Both are explicitly instantiated in
// nnet.cpp.
//
// Batch normalisation is per feature: every cell of the pooled grid has its
// own statistics over the batch, its own scale and its own shift. This
// removes the large common-mode offset that spectrogram features otherwise
// carry into the dense layer.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "vibdiag/spectro.hpp"

namespace vibdiag::nnet {

// Planar channels x height x width grid.
template <typename T>
struct Grid {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
      : channels(c), height(h), width(w), data(c * h * w, fill) {}

  std::size_t size() const { return data.size(); }
  T& at(std::size_t c, std::size_t i, std::size_t j) { return data[(c * height + i) * width + j]; }
  const T& at(std::size_t c, std::size_t i, std::size_t j) const {
    return data[(c * height + i) * width + j];
  }
  T* plane(std::size_t c) { return data.data() + c * height * width; }
  const T* plane(std::size_t c) const { return data.data() + c * height * width; }
};

// Frame x bin x channel segment -> planar grid (channel, frame, bin).
template <typename T>
Grid<T> to_grid(const spectro::SpectrogramSegment& seg);

enum class Activation { linear, relu };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view s);

struct Architecture {
  std::size_t input_frames = 16;
  std::size_t input_bins = 251;
  std::size_t input_channels = 3;
  std::size_t filters = 4;
  std::size_t hidden = 4;
  std::size_t outputs = 3;
  double dropout_rate = 0.10;
  Activation hidden_activation = Activation::linear;

  std::size_t conv_height() const { return input_frames - 2; }
  std::size_t conv_width() const { return input_bins - 2; }
  std::size_t pool_height() const { return conv_height() / 2; }
  std::size_t pool_width() const { return conv_width() / 2; }
  std::size_t feature_length() const { return pool_height() * pool_width() * filters; }

  bool operator==(const Architecture&) const = default;

  // Four 3x3 filters, 4-node dense layer, 3 sigmoid outputs, 10% dropout.
  static Architecture classifier(const spectro::SegmentLayout& layout);
  // Sixteen-filter front end used for anomaly features.
  static Architecture extractor16(const spectro::SegmentLayout& layout);
};

void validate(const Architecture& arch);
nlohmann::json to_json(const Architecture& arch);
Architecture architecture_from_json(const nlohmann::json& j);

inline constexpr std::size_t kParamTensors = 8;
inline constexpr std::array<std::string_view, kParamTensors> kParamNames = {
    "conv.weight", "conv.bias",     "bn.gamma",      "bn.beta",
    "hidden.weight", "hidden.bias", "output.weight", "output.bias"};

// Trainable parameters. Also used for gradients and Adam moments.
template <typename T>
struct ParamSet {
  std::vector<T> conv_weight;    // [filter][channel][3][3]
  std::vector<T> conv_bias;      // [filter]
  std::vector<T> bn_gamma;       // [feature], pooled grid order
  std::vector<T> bn_beta;        // [feature]
  std::vector<T> hidden_weight;  // [hidden][feature]
  std::vector<T> hidden_bias;    // [hidden]
  std::vector<T> output_weight;  // [output][hidden]
  std::vector<T> output_bias;    // [output]

  static ParamSet zeros(const Architecture& arch);
  std::array<std::span<T>, kParamTensors> tensors();
  std::array<std::span<const T>, kParamTensors> tensors() const;
  std::size_t count() const;
};

template <typename T>
struct CnnModel {
  Architecture arch;
  ParamSet<T> params;
  std::vector<T> running_mean;  // [feature]
  std::vector<T> running_var;   // [feature]
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.9;
};

// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases, gamma = 1,
// beta = 0, running mean 0 and variance 1.
template <typename T>
CnnModel<T> make_model(const Architecture& arch, std::uint64_t seed);

template <typename To, typename From>
CnnModel<To> convert(const CnnModel<From>& m);

enum class Mode { train, infer };

// ---- layer kernels ---------------------------------------------------------

// Valid 3x3 cross-correlation; weights [filter][channel][3][3].
template <typename T>
Grid<T> conv2d_forward(const Grid<T>& input, std::span<const T> weights, std::span<const T> bias,
                       std::size_t filters);

// Accumulates into dweights/dbias; writes the input gradient when din != null.
template <typename T>
void conv2d_backward(const Grid<T>& input, const Grid<T>& dout, std::span<const T> weights,
                     std::span<T> dweights, std::span<T> dbias, Grid<T>* din);

template <typename T>
struct Pooled {
  Grid<T> output;
  std::vector<std::uint32_t> argmax;  // flat input index per output cell
};

// Non-overlapping 2x2 windows, stride 2; odd trailing row/column dropped,
// ties resolve to the first index in row-major window order.
template <typename T>
Pooled<T> maxpool2x2(const Grid<T>& input);

template <typename T>
Grid<T> maxpool2x2_backward(const Grid<T>& dout, std::span<const std::uint32_t> argmax,
                            std::size_t in_channels, std::size_t in_height, std::size_t in_width);

template <typename T>
struct BatchNormCache {
  std::vector<Grid<T>> xhat;
  std::vector<double> mean;
  std::vector<double> var;  // biased batch variance
  std::vector<double> inv_std;
};

// Train mode normalises with batch statistics (batch >= 2) and fills `cache`;
// infer mode uses the running statistics.
template <typename T>
std::vector<Grid<T>> batchnorm_forward(std::span<const Grid<T>> batch, std::span<const T> gamma,
                                       std::span<const T> beta, std::span<const T> running_mean,
                                       std::span<const T> running_var, double epsilon, Mode mode,
                                       BatchNormCache<T>* cache);

template <typename T>
std::vector<Grid<T>> batchnorm_backward(std::span<const Grid<T>> dout, const BatchNormCache<T>& cache,
                                        std::span<const T> gamma, std::span<T> dgamma,
                                        std::span<T> dbeta);

// running = momentum * running + (1 - momentum) * batch statistic.
template <typename T>
void update_running_stats(std::span<T> running_mean, std::span<T> running_var,
                          const BatchNormCache<T>& cache, double momentum);

// y = W x + b with W [out][in].
template <typename T>
std::vector<T> dense_forward(std::span<const T> x, std::span<const T> weights, std::span<const T> bias);

template <typename T>
void dense_backward(std::span<const T> x, std::span<const T> dy, std::span<const T> weights,
                    std::span<T> dweights, std::span<T> dbias, std::span<T> dx);

// Sigmoid clamped into the open interval (0, 1) at type T's resolution.
template <typename T>
T sigmoid(T x);

// Mean over all elements of -[y log p + (1 - y) log(1 - p)], p clamped to
// [1e-7, 1 - 1e-7]. Labels must be 0 or 1.
template <typename T>
double bce_loss(std::span<const T> probabilities, std::span<const T> labels);

// ---- whole model -----------------------------------------------------------

template <typename T>
struct ForwardCache {
  Mode mode = Mode::infer;
  std::size_t batch = 0;
  std::vector<Grid<T>> input;
  std::vector<std::vector<std::uint32_t>> pool_argmax;
  BatchNormCache<T> bn;
  std::vector<Grid<T>> bn_out;               // post-batchnorm, pre-ReLU
  std::vector<std::vector<T>> features;      // flattened ReLU output after dropout
  std::vector<std::vector<std::uint8_t>> keep;  // dropout mask
  std::vector<std::vector<T>> hidden_pre;
  std::vector<std::vector<T>> hidden_act;
  std::vector<T> probabilities;              // [batch][outputs]
};

// Returns probabilities row-major [batch][outputs]. In train mode dropout is
// drawn from `dropout_seed` (inverted scaling); infer mode applies no dropout.
template <typename T>
std::vector<T> model_forward(const CnnModel<T>& model, std::span<const Grid<T>> batch, Mode mode,
                             ForwardCache<T>* cache = nullptr, std::uint64_t dropout_seed = 0);

// Exact gradients of bce_loss(model_forward(...), labels) for the cached
// train-mode pass. The output-layer gradient uses (p - y) directly.
template <typename T>
ParamSet<T> backward(const CnnModel<T>& model, const ForwardCache<T>& cache,
                     std::span<const T> labels);

// Flattened post-batchnorm activations (conv -> pool -> batchnorm, infer mode),
// channel-major.
template <typename T>
std::vector<T> extract_features(const CnnModel<T>& model, const Grid<T>& input);

struct FeatureVector {
  std::vector<float> values;
  std::string model_id;
  std::string segment_id;
};

FeatureVector extract_features(const CnnModel<float>& model, const spectro::SpectrogramSegment& seg,
                               std::string model_id = {}, std::string segment_id = {});

// Sets running statistics to the exact population statistics of the
// pooled conv maps over `set`.
void fit_batchnorm_statistics(CnnModel<float>& model, const spectro::SegmentSet& set);

// ---- optimisation ----------------------------------------------------------

template <typename T>
struct AdamState {
  ParamSet<T> m;
  ParamSet<T> v;
  std::uint64_t step = 0;
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState init(const Architecture& arch);
};

// Bias-corrected Adam update. Throws NumericError naming the first
// parameter tensor holding a non-finite gradient.
template <typename T>
void adam_step(ParamSet<T>& params, const ParamSet<T>& grads, AdamState<T>& state);

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool shuffle = true;
  double learning_rate = 1e-3;
};

nlohmann::json to_json(const TrainConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double validation_subset_accuracy = 0.0;
  std::array<double, kComponentCount> validation_label_accuracy{};
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Single-threaded and bit-deterministic for a fixed seed. A trailing batch of
// one instance is skipped (batchnorm needs two).
TrainHistory train_multilabel(CnnModel<float>& model, const spectro::LabeledDataset& dataset,
                              const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Infer-mode probabilities [n][outputs] for every segment of `set`.
std::vector<float> predict(const CnnModel<float>& model, const spectro::SegmentSet& set,
                           std::size_t batch_size = 64);

// ---- persistence -----------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

// Header: architecture, batchnorm constants, parameter order and shapes plus
// caller metadata. Payload: float32 tensors in kParamNames order, then
// running mean, then running variance.
void save_model(const CnnModel<float>& model, const std::filesystem::path& path,
                const nlohmann::json& metadata = nlohmann::json::object());
CnnModel<float> load_model(const std::filesystem::path& path, nlohmann::json* metadata = nullptr);

}  // namespace vibdiag::nnet
