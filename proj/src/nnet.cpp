// SPDX-License-Identifier: Apache-2.0

#include "vibdiag/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "vibdiag/io.hpp"

namespace vibdiag::nnet {

namespace {

constexpr std::size_t kKernel = 3;
constexpr std::size_t kTaps = kKernel * kKernel;

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

std::string shape_str(std::size_t c, std::size_t h, std::size_t w) {
  return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

template <typename T>
void check_finite(std::span<const T> v, std::string_view name) {
  for (T x : v) {
    if (!std::isfinite(x)) throw NumericError("non-finite value in " + std::string(name));
  }
}

}  // namespace

// ---- shapes ----------------------------------------------------------------

template <typename T>
Grid<T> to_grid(const spectro::SpectrogramSegment& seg) {
  const auto& l = seg.layout;
  if (seg.magnitudes.size() != l.frames * l.bins * l.channels) {
    throw DataError("segment payload does not match its layout");
  }
  Grid<T> g(l.channels, l.frames, l.bins);
  for (std::size_t f = 0; f < l.frames; ++f)
    for (std::size_t b = 0; b < l.bins; ++b)
      for (std::size_t c = 0; c < l.channels; ++c)
        g.at(c, f, b) = static_cast<T>(seg.magnitudes[(f * l.bins + b) * l.channels + c]);
  return g;
}

std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "linear"; }

Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "linear") return Activation::linear;
  throw ConfigError("unknown activation '" + std::string(s) + "' (expected linear or relu)");
}

Architecture Architecture::classifier(const spectro::SegmentLayout& layout) {
  Architecture a;
  a.input_frames = layout.frames;
  a.input_bins = layout.bins;
  a.input_channels = layout.channels;
  return a;
}

Architecture Architecture::extractor16(const spectro::SegmentLayout& layout) {
  Architecture a = classifier(layout);
  a.filters = 16;
  return a;
}

void validate(const Architecture& a) {
  if (a.input_frames < 4 || a.input_bins < 4) {
    throw ConfigError("architecture: input " + std::to_string(a.input_frames) + "x" +
                      std::to_string(a.input_bins) +
                      " too small for a 3x3 convolution followed by 2x2 pooling");
  }
  if (a.input_channels == 0 || a.filters == 0 || a.hidden == 0 || a.outputs == 0) {
    throw ConfigError("architecture: channel, filter, hidden and output counts must be positive");
  }
  if (!(a.dropout_rate >= 0.0 && a.dropout_rate < 1.0)) {
    throw ConfigError("architecture: dropout_rate must lie in [0, 1)");
  }
}

nlohmann::json to_json(const Architecture& a) {
  return {{"input", {a.input_frames, a.input_bins, a.input_channels}},
          {"conv", {{"filters", a.filters}, {"kernel", {kKernel, kKernel}}, {"padding", "valid"}}},
          {"pool", {{"window", {2, 2}}, {"stride", 2}}},
          {"batchnorm", "per-feature"},
          {"hidden", a.hidden},
          {"outputs", a.outputs},
          {"activation", {{"features", "relu"}, {"hidden", to_string(a.hidden_activation)}, {"output", "sigmoid"}}},
          {"dropout_rate", a.dropout_rate},
          {"feature_length", a.feature_length()}};
}

Architecture architecture_from_json(const nlohmann::json& j) {
  try {
    Architecture a;
    const auto& in = j.at("input");
    a.input_frames = in.at(0).get<std::size_t>();
    a.input_bins = in.at(1).get<std::size_t>();
    a.input_channels = in.at(2).get<std::size_t>();
    a.filters = j.at("conv").at("filters").get<std::size_t>();
    a.hidden = j.at("hidden").get<std::size_t>();
    a.outputs = j.at("outputs").get<std::size_t>();
    a.dropout_rate = j.at("dropout_rate").get<double>();
    a.hidden_activation = parse_activation(j.at("activation").at("hidden").get<std::string>());
    validate(a);
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("architecture: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("architecture: ") + e.what());
  }
}

template <typename T>
ParamSet<T> ParamSet<T>::zeros(const Architecture& a) {
  ParamSet p;
  p.conv_weight.assign(a.filters * a.input_channels * kTaps, T(0));
  p.conv_bias.assign(a.filters, T(0));
  p.bn_gamma.assign(a.feature_length(), T(0));
  p.bn_beta.assign(a.feature_length(), T(0));
  p.hidden_weight.assign(a.hidden * a.feature_length(), T(0));
  p.hidden_bias.assign(a.hidden, T(0));
  p.output_weight.assign(a.outputs * a.hidden, T(0));
  p.output_bias.assign(a.outputs, T(0));
  return p;
}

template <typename T>
std::array<std::span<T>, kParamTensors> ParamSet<T>::tensors() {
  return {conv_weight, conv_bias, bn_gamma, bn_beta, hidden_weight, hidden_bias, output_weight,
          output_bias};
}

template <typename T>
std::array<std::span<const T>, kParamTensors> ParamSet<T>::tensors() const {
  return {conv_weight, conv_bias, bn_gamma, bn_beta, hidden_weight, hidden_bias, output_weight,
          output_bias};
}

template <typename T>
std::size_t ParamSet<T>::count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.size();
  return n;
}

template <typename T>
CnnModel<T> make_model(const Architecture& arch, std::uint64_t seed) {
  validate(arch);
  CnnModel<T> m;
  m.arch = arch;
  m.params = ParamSet<T>::zeros(arch);
  std::mt19937_64 rng(seed);
  auto fill = [&rng](std::vector<T>& w, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& x : w) x = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
  };
  fill(m.params.conv_weight, arch.input_channels * kTaps);
  fill(m.params.hidden_weight, arch.feature_length());
  fill(m.params.output_weight, arch.hidden);
  std::fill(m.params.bn_gamma.begin(), m.params.bn_gamma.end(), T(1));
  m.running_mean.assign(arch.feature_length(), T(0));
  m.running_var.assign(arch.feature_length(), T(1));
  return m;
}

template <typename To, typename From>
CnnModel<To> convert(const CnnModel<From>& m) {
  auto cast = [](const std::vector<From>& v) { return std::vector<To>(v.begin(), v.end()); };
  CnnModel<To> out;
  out.arch = m.arch;
  out.params.conv_weight = cast(m.params.conv_weight);
  out.params.conv_bias = cast(m.params.conv_bias);
  out.params.bn_gamma = cast(m.params.bn_gamma);
  out.params.bn_beta = cast(m.params.bn_beta);
  out.params.hidden_weight = cast(m.params.hidden_weight);
  out.params.hidden_bias = cast(m.params.hidden_bias);
  out.params.output_weight = cast(m.params.output_weight);
  out.params.output_bias = cast(m.params.output_bias);
  out.running_mean = cast(m.running_mean);
  out.running_var = cast(m.running_var);
  out.bn_epsilon = m.bn_epsilon;
  out.bn_momentum = m.bn_momentum;
  return out;
}

// ---- convolution -----------------------------------------------------------

template <typename T>
Grid<T> conv2d_forward(const Grid<T>& in, std::span<const T> weights, std::span<const T> bias,
                       std::size_t filters) {
  if (in.height < kKernel || in.width < kKernel) {
    throw DataError("conv2d: input " + shape_str(in.channels, in.height, in.width) +
                    " smaller than the 3x3 kernel");
  }
  if (weights.size() != filters * in.channels * kTaps || bias.size() != filters) {
    throw DataError("conv2d: weights for " + std::to_string(weights.size() / kTaps) +
                    " filter-channel pairs do not match " + std::to_string(filters) + " filters x " +
                    std::to_string(in.channels) + " input channels");
  }
  const std::size_t oh = in.height - 2, ow = in.width - 2;
  Grid<T> out(filters, oh, ow);
  for (std::size_t f = 0; f < filters; ++f) {
    T* dst = out.plane(f);
    std::fill(dst, dst + oh * ow, bias[f]);
    for (std::size_t c = 0; c < in.channels; ++c) {
      const T* src = in.plane(c);
      const T* w = weights.data() + (f * in.channels + c) * kTaps;
      for (std::size_t ki = 0; ki < kKernel; ++ki) {
        for (std::size_t kj = 0; kj < kKernel; ++kj) {
          const T wv = w[ki * kKernel + kj];
          for (std::size_t i = 0; i < oh; ++i) {
            T* orow = dst + i * ow;
            const T* irow = src + (i + ki) * in.width + kj;
#pragma omp simd
            for (std::size_t j = 0; j < ow; ++j) orow[j] += wv * irow[j];
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
void conv2d_backward(const Grid<T>& in, const Grid<T>& dout, std::span<const T> weights,
                     std::span<T> dweights, std::span<T> dbias, Grid<T>* din) {
  const std::size_t filters = dout.channels;
  const std::size_t oh = dout.height, ow = dout.width;
  if (oh + 2 != in.height || ow + 2 != in.width || dweights.size() != filters * in.channels * kTaps ||
      dbias.size() != filters) {
    throw DataError("conv2d_backward: shape mismatch");
  }
  if (din) *din = Grid<T>(in.channels, in.height, in.width);
  for (std::size_t f = 0; f < filters; ++f) {
    const T* g = dout.plane(f);
    T bsum = 0;
#pragma omp simd reduction(+ : bsum)
    for (std::size_t k = 0; k < oh * ow; ++k) bsum += g[k];
    dbias[f] += bsum;
    for (std::size_t c = 0; c < in.channels; ++c) {
      const T* src = in.plane(c);
      T* dw = dweights.data() + (f * in.channels + c) * kTaps;
      const T* w = weights.data() + (f * in.channels + c) * kTaps;
      for (std::size_t ki = 0; ki < kKernel; ++ki) {
        for (std::size_t kj = 0; kj < kKernel; ++kj) {
          T acc = 0;
          for (std::size_t i = 0; i < oh; ++i) {
            const T* grow = g + i * ow;
            const T* irow = src + (i + ki) * in.width + kj;
#pragma omp simd reduction(+ : acc)
            for (std::size_t j = 0; j < ow; ++j) acc += grow[j] * irow[j];
          }
          dw[ki * kKernel + kj] += acc;
          if (din) {
            const T wv = w[ki * kKernel + kj];
            T* dplane = din->plane(c);
            for (std::size_t i = 0; i < oh; ++i) {
              const T* grow = g + i * ow;
              T* drow = dplane + (i + ki) * in.width + kj;
#pragma omp simd
              for (std::size_t j = 0; j < ow; ++j) drow[j] += wv * grow[j];
            }
          }
        }
      }
    }
  }
}

// ---- pooling ---------------------------------------------------------------

template <typename T>
Pooled<T> maxpool2x2(const Grid<T>& in) {
  if (in.size() == 0) throw DataError("maxpool2x2: empty input");
  if (in.height < 2 || in.width < 2) {
    throw DataError("maxpool2x2: input " + shape_str(in.channels, in.height, in.width) +
                    " smaller than the 2x2 window");
  }
  const std::size_t ph = in.height / 2, pw = in.width / 2;
  Pooled<T> p{Grid<T>(in.channels, ph, pw), std::vector<std::uint32_t>(in.channels * ph * pw)};
  for (std::size_t c = 0; c < in.channels; ++c) {
    const T* src = in.plane(c);
    for (std::size_t i = 0; i < ph; ++i) {
      for (std::size_t j = 0; j < pw; ++j) {
        const std::size_t r0 = (2 * i) * in.width + 2 * j;
        const std::size_t cand[4] = {r0, r0 + 1, r0 + in.width, r0 + in.width + 1};
        std::size_t best = cand[0];
        for (int k = 1; k < 4; ++k) {
          if (src[cand[k]] > src[best]) best = cand[k];
        }
        const std::size_t o = (c * ph + i) * pw + j;
        p.output.data[o] = src[best];
        p.argmax[o] = static_cast<std::uint32_t>(c * in.height * in.width + best);
      }
    }
  }
  return p;
}

template <typename T>
Grid<T> maxpool2x2_backward(const Grid<T>& dout, std::span<const std::uint32_t> argmax,
                            std::size_t c, std::size_t h, std::size_t w) {
  if (argmax.size() != dout.size()) throw DataError("maxpool2x2_backward: argmax size mismatch");
  Grid<T> din(c, h, w);
  for (std::size_t k = 0; k < dout.size(); ++k) din.data[argmax[k]] += dout.data[k];
  return din;
}

// ---- batch normalisation ---------------------------------------------------

template <typename T>
std::vector<Grid<T>> batchnorm_forward(std::span<const Grid<T>> batch, std::span<const T> gamma,
                                       std::span<const T> beta, std::span<const T> running_mean,
                                       std::span<const T> running_var, double eps, Mode mode,
                                       BatchNormCache<T>* cache) {
  if (batch.empty()) throw DataError("batchnorm: empty batch");
  const std::size_t n = batch[0].size();
  if (gamma.size() != n || beta.size() != n) {
    throw DataError("batchnorm: " + std::to_string(gamma.size()) + " scale entries for " +
                    std::to_string(n) + " features");
  }
  for (const auto& g : batch) {
    if (g.channels != batch[0].channels || g.height != batch[0].height || g.width != batch[0].width) {
      throw DataError("batchnorm: batch members differ in shape");
    }
  }
  std::vector<double> mean(n, 0.0), var(n, 0.0), inv_std(n);
  if (mode == Mode::train) {
    if (batch.size() < 2) throw DataError("batchnorm: train mode needs a batch of at least 2");
    const double count = static_cast<double>(batch.size());
    for (const auto& g : batch)
      for (std::size_t k = 0; k < n; ++k) mean[k] += static_cast<double>(g.data[k]);
    for (auto& m : mean) m /= count;
    for (const auto& g : batch) {
      for (std::size_t k = 0; k < n; ++k) {
        const double d = static_cast<double>(g.data[k]) - mean[k];
        var[k] += d * d;
      }
    }
    for (auto& v : var) v /= count;
  } else {
    if (running_mean.size() != n || running_var.size() != n) {
      throw DataError("batchnorm: running statistics do not match the feature count");
    }
    for (std::size_t k = 0; k < n; ++k) {
      mean[k] = static_cast<double>(running_mean[k]);
      var[k] = static_cast<double>(running_var[k]);
    }
  }
  for (std::size_t k = 0; k < n; ++k) inv_std[k] = 1.0 / std::sqrt(var[k] + eps);

  std::vector<T> mu(n), is(n);
  for (std::size_t k = 0; k < n; ++k) {
    mu[k] = static_cast<T>(mean[k]);
    is[k] = static_cast<T>(inv_std[k]);
  }
  std::vector<Grid<T>> out;
  out.reserve(batch.size());
  if (cache) {
    cache->xhat.clear();
    cache->xhat.reserve(batch.size());
  }
  for (const auto& g : batch) {
    Grid<T> y(g.channels, g.height, g.width);
    Grid<T> xh(g.channels, g.height, g.width);
#pragma omp simd
    for (std::size_t k = 0; k < n; ++k) {
      xh.data[k] = (g.data[k] - mu[k]) * is[k];
      y.data[k] = xh.data[k] * gamma[k] + beta[k];
    }
    out.push_back(std::move(y));
    if (cache) cache->xhat.push_back(std::move(xh));
  }
  if (cache) {
    cache->mean = std::move(mean);
    cache->var = std::move(var);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

template <typename T>
std::vector<Grid<T>> batchnorm_backward(std::span<const Grid<T>> dout, const BatchNormCache<T>& cache,
                                        std::span<const T> gamma, std::span<T> dgamma,
                                        std::span<T> dbeta) {
  if (dout.size() != cache.xhat.size() || dout.empty()) {
    throw DataError("batchnorm_backward: missing or mismatched forward cache");
  }
  const std::size_t n = dout[0].size();
  if (gamma.size() != n || dgamma.size() != n || dbeta.size() != n || cache.inv_std.size() != n) {
    throw DataError("batchnorm_backward: shape mismatch");
  }
  const double count = static_cast<double>(dout.size());
  std::vector<double> sum_dy(n, 0.0), sum_dy_xhat(n, 0.0);
  for (std::size_t b = 0; b < dout.size(); ++b) {
    const T* dy = dout[b].data.data();
    const T* xh = cache.xhat[b].data.data();
    for (std::size_t k = 0; k < n; ++k) {
      sum_dy[k] += static_cast<double>(dy[k]);
      sum_dy_xhat[k] += static_cast<double>(dy[k]) * static_cast<double>(xh[k]);
    }
  }
  // dx = gamma * inv_std / M * (M dy - sum(dy) - xhat * sum(dy * xhat))
  std::vector<T> scale(n), a(n), q(n);
  for (std::size_t k = 0; k < n; ++k) {
    dgamma[k] += static_cast<T>(sum_dy_xhat[k]);
    dbeta[k] += static_cast<T>(sum_dy[k]);
    scale[k] = static_cast<T>(static_cast<double>(gamma[k]) * cache.inv_std[k] / count);
    a[k] = static_cast<T>(sum_dy[k]);
    q[k] = static_cast<T>(sum_dy_xhat[k]);
  }
  const T cnt = static_cast<T>(count);
  std::vector<Grid<T>> din;
  din.reserve(dout.size());
  for (std::size_t b = 0; b < dout.size(); ++b) {
    Grid<T> d(dout[b].channels, dout[b].height, dout[b].width);
    const T* dy = dout[b].data.data();
    const T* xh = cache.xhat[b].data.data();
#pragma omp simd
    for (std::size_t k = 0; k < n; ++k) d.data[k] = scale[k] * (cnt * dy[k] - a[k] - xh[k] * q[k]);
    din.push_back(std::move(d));
  }
  return din;
}

template <typename T>
void update_running_stats(std::span<T> running_mean, std::span<T> running_var,
                          const BatchNormCache<T>& cache, double momentum) {
  for (std::size_t c = 0; c < running_mean.size(); ++c) {
    running_mean[c] = static_cast<T>(momentum * static_cast<double>(running_mean[c]) +
                                     (1.0 - momentum) * cache.mean[c]);
    running_var[c] = static_cast<T>(momentum * static_cast<double>(running_var[c]) +
                                    (1.0 - momentum) * cache.var[c]);
  }
}

// ---- dense / activations / loss -------------------------------------------

template <typename T>
std::vector<T> dense_forward(std::span<const T> x, std::span<const T> w, std::span<const T> b) {
  const std::size_t out = b.size();
  if (w.size() != out * x.size()) {
    throw DataError("dense: weight matrix " + std::to_string(w.size()) + " does not match " +
                    std::to_string(out) + "x" + std::to_string(x.size()));
  }
  std::vector<T> y(out);
  for (std::size_t o = 0; o < out; ++o) {
    const T* row = w.data() + o * x.size();
    T acc = 0;
#pragma omp simd reduction(+ : acc)
    for (std::size_t i = 0; i < x.size(); ++i) acc += row[i] * x[i];
    y[o] = acc + b[o];
  }
  return y;
}

template <typename T>
void dense_backward(std::span<const T> x, std::span<const T> dy, std::span<const T> w,
                    std::span<T> dw, std::span<T> db, std::span<T> dx) {
  const std::size_t in = x.size();
  if (w.size() != dy.size() * in || dw.size() != w.size() || db.size() != dy.size() ||
      (!dx.empty() && dx.size() != in)) {
    throw DataError("dense_backward: shape mismatch");
  }
  if (!dx.empty()) std::fill(dx.begin(), dx.end(), T(0));
  for (std::size_t o = 0; o < dy.size(); ++o) {
    const T g = dy[o];
    db[o] += g;
    T* dwr = dw.data() + o * in;
    const T* wr = w.data() + o * in;
#pragma omp simd
    for (std::size_t i = 0; i < in; ++i) dwr[i] += g * x[i];
    if (!dx.empty()) {
#pragma omp simd
      for (std::size_t i = 0; i < in; ++i) dx[i] += g * wr[i];
    }
  }
}

template <typename T>
T sigmoid(T x) {
  const double xd = static_cast<double>(x);
  const double p = xd >= 0.0 ? 1.0 / (1.0 + std::exp(-xd)) : std::exp(xd) / (1.0 + std::exp(xd));
  const T lo = std::numeric_limits<T>::min();
  const T hi = std::nextafter(T(1), T(0));
  return std::clamp(static_cast<T>(p), lo, hi);
}

template <typename T>
double bce_loss(std::span<const T> probabilities, std::span<const T> labels) {
  if (probabilities.size() != labels.size() || probabilities.empty()) {
    throw DataError("bce_loss: " + std::to_string(probabilities.size()) + " probabilities vs " +
                    std::to_string(labels.size()) + " labels");
  }
  constexpr double kClamp = 1e-7;
  double sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double y = static_cast<double>(labels[i]);
    if (y != 0.0 && y != 1.0) throw DataError("bce_loss: labels must be 0 or 1");
    const double p = std::clamp(static_cast<double>(probabilities[i]), kClamp, 1.0 - kClamp);
    sum += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
  }
  return sum / static_cast<double>(labels.size());
}

// ---- model -----------------------------------------------------------------

namespace {

template <typename T>
void check_input(const Architecture& a, const Grid<T>& g) {
  if (g.channels != a.input_channels || g.height != a.input_frames || g.width != a.input_bins) {
    throw DataError("model input " + shape_str(g.channels, g.height, g.width) +
                    " does not match expected " +
                    shape_str(a.input_channels, a.input_frames, a.input_bins) +
                    " (channels x frames x bins)");
  }
}

}  // namespace

template <typename T>
std::vector<T> model_forward(const CnnModel<T>& model, std::span<const Grid<T>> batch, Mode mode,
                             ForwardCache<T>* cache, std::uint64_t dropout_seed) {
  const Architecture& a = model.arch;
  const auto& P = model.params;
  if (batch.empty()) throw DataError("model_forward: empty batch");
  for (const auto& g : batch) check_input(a, g);

  std::vector<Grid<T>> pooled;
  pooled.reserve(batch.size());
  if (cache) {
    *cache = ForwardCache<T>{};
    cache->mode = mode;
    cache->batch = batch.size();
  }
  for (const auto& g : batch) {
    Grid<T> conv = conv2d_forward<T>(g, P.conv_weight, P.conv_bias, a.filters);
    Pooled<T> p = maxpool2x2(conv);
    pooled.push_back(std::move(p.output));
    if (cache) {
      cache->input.push_back(g);
      cache->pool_argmax.push_back(std::move(p.argmax));
    }
  }
  std::vector<Grid<T>> bn = batchnorm_forward<T>(pooled, P.bn_gamma, P.bn_beta, model.running_mean,
                                                 model.running_var, model.bn_epsilon, mode,
                                                 cache ? &cache->bn : nullptr);

  const bool dropout = mode == Mode::train && a.dropout_rate > 0.0;
  const T keep_scale = dropout ? static_cast<T>(1.0 / (1.0 - a.dropout_rate)) : T(1);
  const bool relu_hidden = a.hidden_activation == Activation::relu;
  std::mt19937_64 rng(dropout_seed);
  std::vector<T> probs(batch.size() * a.outputs);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    std::vector<T> feat(bn[b].data.size());
    std::vector<std::uint8_t> keep;
    for (std::size_t k = 0; k < feat.size(); ++k) feat[k] = std::max(bn[b].data[k], T(0));
    if (dropout) {
      keep.resize(feat.size());
      for (std::size_t k = 0; k < feat.size(); ++k) {
        keep[k] = uniform01(rng) >= a.dropout_rate ? 1 : 0;
        feat[k] = keep[k] ? feat[k] * keep_scale : T(0);
      }
    }
    std::vector<T> hpre = dense_forward<T>(feat, P.hidden_weight, P.hidden_bias);
    std::vector<T> hact(hpre.size());
    for (std::size_t k = 0; k < hpre.size(); ++k) hact[k] = relu_hidden ? std::max(hpre[k], T(0)) : hpre[k];
    const std::vector<T> logits = dense_forward<T>(hact, P.output_weight, P.output_bias);
    for (std::size_t o = 0; o < a.outputs; ++o) probs[b * a.outputs + o] = sigmoid(logits[o]);
    if (cache) {
      cache->features.push_back(std::move(feat));
      cache->keep.push_back(std::move(keep));
      cache->hidden_pre.push_back(std::move(hpre));
      cache->hidden_act.push_back(std::move(hact));
    }
  }
  if (cache) {
    cache->bn_out = std::move(bn);
    cache->probabilities = probs;
  }
  return probs;
}

template <typename T>
ParamSet<T> backward(const CnnModel<T>& model, const ForwardCache<T>& cache,
                     std::span<const T> labels) {
  const Architecture& a = model.arch;
  const auto& P = model.params;
  if (cache.batch == 0 || cache.mode != Mode::train || cache.bn.xhat.size() != cache.batch) {
    throw DataError("backward: no train-mode forward cache available");
  }
  if (labels.size() != cache.batch * a.outputs) {
    throw DataError("backward: " + std::to_string(labels.size()) + " labels for a batch of " +
                    std::to_string(cache.batch) + " x " + std::to_string(a.outputs));
  }
  ParamSet<T> G = ParamSet<T>::zeros(a);
  const T norm = static_cast<T>(1.0 / static_cast<double>(cache.batch * a.outputs));
  const bool dropout = !cache.keep.empty() && !cache.keep[0].empty();
  const T keep_scale = dropout ? static_cast<T>(1.0 / (1.0 - a.dropout_rate)) : T(1);
  const bool relu_hidden = a.hidden_activation == Activation::relu;

  std::vector<Grid<T>> dbn;
  dbn.reserve(cache.batch);
  for (std::size_t b = 0; b < cache.batch; ++b) {
    std::vector<T> dlogit(a.outputs);
    for (std::size_t o = 0; o < a.outputs; ++o) {
      dlogit[o] = (cache.probabilities[b * a.outputs + o] - labels[b * a.outputs + o]) * norm;
    }
    std::vector<T> dh(a.hidden);
    dense_backward<T>(cache.hidden_act[b], dlogit, P.output_weight, G.output_weight, G.output_bias, dh);
    for (std::size_t k = 0; k < a.hidden; ++k) {
      if (relu_hidden && !(cache.hidden_pre[b][k] > T(0))) dh[k] = T(0);
    }
    std::vector<T> dfeat(cache.features[b].size());
    dense_backward<T>(cache.features[b], dh, P.hidden_weight, G.hidden_weight, G.hidden_bias, dfeat);
    const Grid<T>& y = cache.bn_out[b];
    Grid<T> d(y.channels, y.height, y.width);
    for (std::size_t k = 0; k < dfeat.size(); ++k) {
      T g = dfeat[k];
      if (dropout) g = cache.keep[b][k] ? g * keep_scale : T(0);
      d.data[k] = y.data[k] > T(0) ? g : T(0);
    }
    dbn.push_back(std::move(d));
  }
  std::vector<Grid<T>> dpool = batchnorm_backward<T>(dbn, cache.bn, P.bn_gamma, G.bn_gamma, G.bn_beta);
  for (std::size_t b = 0; b < cache.batch; ++b) {
    const Grid<T>& in = cache.input[b];
    Grid<T> dconv = maxpool2x2_backward<T>(dpool[b], cache.pool_argmax[b], a.filters, in.height - 2,
                                           in.width - 2);
    conv2d_backward<T>(in, dconv, P.conv_weight, G.conv_weight, G.conv_bias, nullptr);
  }
  return G;
}

template <typename T>
std::vector<T> extract_features(const CnnModel<T>& model, const Grid<T>& input) {
  check_input(model.arch, input);
  const auto& P = model.params;
  Grid<T> conv = conv2d_forward<T>(input, P.conv_weight, P.conv_bias, model.arch.filters);
  Pooled<T> pooled = maxpool2x2(conv);
  std::vector<Grid<T>> one;
  one.push_back(std::move(pooled.output));
  auto bn = batchnorm_forward<T>(one, P.bn_gamma, P.bn_beta, model.running_mean, model.running_var,
                                 model.bn_epsilon, Mode::infer, nullptr);
  return std::move(bn[0].data);
}

FeatureVector extract_features(const CnnModel<float>& model, const spectro::SpectrogramSegment& seg,
                               std::string model_id, std::string segment_id) {
  FeatureVector fv;
  fv.values = extract_features<float>(model, to_grid<float>(seg));
  fv.model_id = std::move(model_id);
  fv.segment_id = std::move(segment_id);
  return fv;
}

void fit_batchnorm_statistics(CnnModel<float>& model, const spectro::SegmentSet& set) {
  if (set.size() < 2) throw DataError("batchnorm statistics need at least 2 segments");
  const auto& a = model.arch;
  const auto& P = model.params;
  const std::size_t n = a.feature_length();
  // Accumulate around the first segment's values for a stable variance.
  std::vector<double> shift(n), sum(n, 0.0), sumsq(n, 0.0);
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Grid<float> g = to_grid<float>(set.at(i));
    check_input(a, g);
    const Grid<float> pooled =
        maxpool2x2(conv2d_forward<float>(g, P.conv_weight, P.conv_bias, a.filters)).output;
    if (i == 0) std::copy(pooled.data.begin(), pooled.data.end(), shift.begin());
    for (std::size_t k = 0; k < n; ++k) {
      const double d = static_cast<double>(pooled.data[k]) - shift[k];
      sum[k] += d;
      sumsq[k] += d * d;
    }
  }
  const double count = static_cast<double>(set.size());
  for (std::size_t k = 0; k < n; ++k) {
    const double m = sum[k] / count;
    model.running_mean[k] = static_cast<float>(shift[k] + m);
    model.running_var[k] = static_cast<float>(std::max(0.0, sumsq[k] / count - m * m));
  }
}

// ---- Adam ------------------------------------------------------------------

template <typename T>
AdamState<T> AdamState<T>::init(const Architecture& arch) {
  AdamState s;
  s.m = ParamSet<T>::zeros(arch);
  s.v = ParamSet<T>::zeros(arch);
  return s;
}

template <typename T>
void adam_step(ParamSet<T>& params, const ParamSet<T>& grads, AdamState<T>& state) {
  auto pt = params.tensors();
  const auto gt = grads.tensors();
  auto mt = state.m.tensors();
  auto vt = state.v.tensors();
  for (std::size_t t = 0; t < kParamTensors; ++t) {
    if (gt[t].size() != pt[t].size() || mt[t].size() != pt[t].size() || vt[t].size() != pt[t].size()) {
      throw DataError("adam_step: shape mismatch in " + std::string(kParamNames[t]));
    }
    for (std::size_t i = 0; i < gt[t].size(); ++i) {
      if (!std::isfinite(gt[t][i])) {
        throw NumericError("adam_step: non-finite gradient in " + std::string(kParamNames[t]) +
                           "[" + std::to_string(i) + "]");
      }
    }
  }
  ++state.step;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < kParamTensors; ++t) {
    for (std::size_t i = 0; i < pt[t].size(); ++i) {
      const double g = static_cast<double>(gt[t][i]);
      const double m = b1 * static_cast<double>(mt[t][i]) + (1.0 - b1) * g;
      const double v = b2 * static_cast<double>(vt[t][i]) + (1.0 - b2) * g * g;
      mt[t][i] = static_cast<T>(m);
      vt[t][i] = static_cast<T>(v);
      const double mhat = m / c1;
      const double vhat = v / c2;
      pt[t][i] = static_cast<T>(static_cast<double>(pt[t][i]) -
                                state.alpha * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

// ---- training --------------------------------------------------------------

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"seed", cfg.seed},
          {"shuffle", cfg.shuffle},
          {"learning_rate", cfg.learning_rate}};
}

namespace {

std::vector<Grid<float>> materialize(const spectro::SegmentSet& set, std::span<const std::size_t> idx) {
  std::vector<Grid<float>> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(to_grid<float>(set.at(i)));
  return out;
}

std::vector<float> label_block(const spectro::SegmentSet& set, std::span<const std::size_t> idx) {
  std::vector<float> y;
  y.reserve(idx.size() * kComponentCount);
  for (std::size_t i : idx) {
    const auto l = set.labels(i);
    for (std::size_t c = 0; c < kComponentCount; ++c) y.push_back(static_cast<float>(l[c]));
  }
  return y;
}

}  // namespace

std::vector<float> predict(const CnnModel<float>& model, const spectro::SegmentSet& set,
                           std::size_t batch_size) {
  std::vector<float> out;
  out.reserve(set.size() * model.arch.outputs);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(set.size(), start + batch_size); ++i) idx.push_back(i);
    const auto grids = materialize(set, idx);
    const auto p = model_forward<float>(model, grids, Mode::infer);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

TrainHistory train_multilabel(CnnModel<float>& model, const spectro::LabeledDataset& ds,
                              const TrainConfig& cfg, const EpochCallback& on_epoch) {
  if (cfg.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (ds.train.empty()) throw DataError("train: training partition is empty");
  if (model.arch.outputs != kComponentCount) {
    throw ConfigError("train: model must have " + std::to_string(kComponentCount) + " outputs");
  }
  const auto layout = ds.train.layout();
  if (layout.frames != model.arch.input_frames || layout.bins != model.arch.input_bins ||
      layout.channels != model.arch.input_channels) {
    throw DataError("train: dataset segments " +
                    shape_str(layout.channels, layout.frames, layout.bins) +
                    " do not match the model input " +
                    shape_str(model.arch.input_channels, model.arch.input_frames,
                              model.arch.input_bins));
  }

  AdamState<float> adam = AdamState<float>::init(model.arch);
  adam.alpha = cfg.learning_rate;
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, "train/shuffle"));
  const std::uint64_t dropout_base = derive_seed(cfg.seed, "train/dropout");

  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);
  TrainHistory history;
  ForwardCache<float> cache;
  std::uint64_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) continue;
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const auto grids = materialize(ds.train, idx);
      const auto labels = label_block(ds.train, idx);
      const auto probs = model_forward<float>(model, grids, Mode::train, &cache,
                                              splitmix64(dropout_base + step));
      const double loss = bce_loss<float>(probs, labels);
      if (!std::isfinite(loss)) {
        throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch + 1) +
                           ", batch " + std::to_string(start / cfg.batch_size + 1));
      }
      const ParamSet<float> grads = backward<float>(model, cache, labels);
      try {
        adam_step(model.params, grads, adam);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch + 1) +
                           ", batch " + std::to_string(start / cfg.batch_size + 1));
      }
      update_running_stats<float>(model.running_mean, model.running_var, cache.bn, model.bn_momentum);
      loss_sum += loss * static_cast<double>(idx.size());
      seen += idx.size();
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    if (!ds.validation.empty()) {
      const auto probs = predict(model, ds.validation);
      std::vector<std::size_t> all(ds.validation.size());
      std::iota(all.begin(), all.end(), 0);
      const auto y = label_block(ds.validation, all);
      rec.validation_loss = bce_loss<float>(probs, y);
      std::size_t subset_ok = 0;
      std::array<std::size_t, kComponentCount> label_ok{};
      for (std::size_t i = 0; i < ds.validation.size(); ++i) {
        bool all_ok = true;
        for (std::size_t c = 0; c < kComponentCount; ++c) {
          const bool pred = probs[i * kComponentCount + c] >= 0.5f;
          const bool truth = y[i * kComponentCount + c] > 0.5f;
          if (pred == truth) ++label_ok[c];
          else all_ok = false;
        }
        subset_ok += all_ok;
      }
      const double n = static_cast<double>(ds.validation.size());
      rec.validation_subset_accuracy = static_cast<double>(subset_ok) / n;
      for (std::size_t c = 0; c < kComponentCount; ++c) {
        rec.validation_label_accuracy[c] = static_cast<double>(label_ok[c]) / n;
      }
    }
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  check_finite<float>(model.params.hidden_weight, "hidden.weight");
  return history;
}

// ---- persistence -----------------------------------------------------------

void save_model(const CnnModel<float>& model, const std::filesystem::path& path,
                const nlohmann::json& metadata) {
  nlohmann::json order = nlohmann::json::array();
  std::vector<float> payload;
  payload.reserve(model.params.count() + 2 * model.arch.feature_length());
  const auto tensors = model.params.tensors();
  for (std::size_t t = 0; t < kParamTensors; ++t) {
    order.push_back({{"name", kParamNames[t]}, {"count", tensors[t].size()}});
    payload.insert(payload.end(), tensors[t].begin(), tensors[t].end());
  }
  order.push_back({{"name", "bn.running_mean"}, {"count", model.running_mean.size()}});
  order.push_back({{"name", "bn.running_var"}, {"count", model.running_var.size()}});
  payload.insert(payload.end(), model.running_mean.begin(), model.running_mean.end());
  payload.insert(payload.end(), model.running_var.begin(), model.running_var.end());
  nlohmann::json header = {
      {"format", "vibdiag.cnn"},
      {"version", kCheckpointVersion},
      {"architecture", to_json(model.arch)},
      {"bn_epsilon", model.bn_epsilon},
      {"bn_momentum", model.bn_momentum},
      {"parameters", order},
      {"metadata", metadata},
  };
  io::write_container(path, std::move(header), io::encode_f32le(payload));
}

CnnModel<float> load_model(const std::filesystem::path& path, nlohmann::json* metadata) {
  const io::Container c = io::read_container(path, "vibdiag.cnn", kCheckpointVersion);
  CnnModel<float> m;
  try {
    m.arch = architecture_from_json(c.header.at("architecture"));
    m.bn_epsilon = c.header.at("bn_epsilon").get<double>();
    m.bn_momentum = c.header.at("bn_momentum").get<double>();
    if (metadata) *metadata = c.header.value("metadata", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path.string() + "': " + e.what());
  }
  m.params = ParamSet<float>::zeros(m.arch);
  m.running_mean.assign(m.arch.feature_length(), 0.0f);
  m.running_var.assign(m.arch.feature_length(), 0.0f);
  const auto values = io::decode_f32le(c.payload);
  const std::size_t expected = m.params.count() + 2 * m.arch.feature_length();
  if (values.size() != expected) {
    throw DataError("'" + path.string() + "': payload holds " + std::to_string(values.size()) +
                    " parameters, architecture needs " + std::to_string(expected));
  }
  std::size_t pos = 0;
  auto take = [&](std::span<float> dst) {
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(pos), dst.size(), dst.begin());
    pos += dst.size();
  };
  for (auto t : m.params.tensors()) take(t);
  take(m.running_mean);
  take(m.running_var);
  return m;
}

// ---- explicit instantiations ----------------------------------------------

#define VIBDIAG_NNET_INSTANTIATE(T)                                                              \
  template Grid<T> to_grid<T>(const spectro::SpectrogramSegment&);                               \
  template struct ParamSet<T>;                                                                   \
  template CnnModel<T> make_model<T>(const Architecture&, std::uint64_t);                        \
  template Grid<T> conv2d_forward<T>(const Grid<T>&, std::span<const T>, std::span<const T>,     \
                                     std::size_t);                                               \
  template void conv2d_backward<T>(const Grid<T>&, const Grid<T>&, std::span<const T>,           \
                                   std::span<T>, std::span<T>, Grid<T>*);                        \
  template Pooled<T> maxpool2x2<T>(const Grid<T>&);                                              \
  template Grid<T> maxpool2x2_backward<T>(const Grid<T>&, std::span<const std::uint32_t>,        \
                                          std::size_t, std::size_t, std::size_t);                \
  template std::vector<Grid<T>> batchnorm_forward<T>(                                            \
      std::span<const Grid<T>>, std::span<const T>, std::span<const T>, std::span<const T>,      \
      std::span<const T>, double, Mode, BatchNormCache<T>*);                                     \
  template std::vector<Grid<T>> batchnorm_backward<T>(std::span<const Grid<T>>,                  \
                                                      const BatchNormCache<T>&,                  \
                                                      std::span<const T>, std::span<T>,          \
                                                      std::span<T>);                             \
  template void update_running_stats<T>(std::span<T>, std::span<T>, const BatchNormCache<T>&,    \
                                        double);                                                 \
  template std::vector<T> dense_forward<T>(std::span<const T>, std::span<const T>,               \
                                           std::span<const T>);                                  \
  template void dense_backward<T>(std::span<const T>, std::span<const T>, std::span<const T>,    \
                                  std::span<T>, std::span<T>, std::span<T>);                     \
  template T sigmoid<T>(T);                                                                      \
  template double bce_loss<T>(std::span<const T>, std::span<const T>);                           \
  template std::vector<T> model_forward<T>(const CnnModel<T>&, std::span<const Grid<T>>, Mode,   \
                                           ForwardCache<T>*, std::uint64_t);                     \
  template ParamSet<T> backward<T>(const CnnModel<T>&, const ForwardCache<T>&,                   \
                                   std::span<const T>);                                          \
  template std::vector<T> extract_features<T>(const CnnModel<T>&, const Grid<T>&);               \
  template struct AdamState<T>;                                                                  \
  template void adam_step<T>(ParamSet<T>&, const ParamSet<T>&, AdamState<T>&);

VIBDIAG_NNET_INSTANTIATE(float)
VIBDIAG_NNET_INSTANTIATE(double)

#undef VIBDIAG_NNET_INSTANTIATE

template CnnModel<double> convert<double, float>(const CnnModel<float>&);
template CnnModel<float> convert<float, double>(const CnnModel<double>&);

}  // namespace vibdiag::nnet
