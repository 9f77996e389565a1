// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference check of the whole network in double precision.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vibdiag/nnet.hpp"

namespace vibdiag::testing {

struct GradCheckResult {
  std::array<double, nnet::kParamTensors> max_relative_error{};
  std::size_t parameters_checked = 0;

  double worst() const { return *std::max_element(max_relative_error.begin(), max_relative_error.end()); }
};

// |a - n| / max(|a|, |n|, floor); the floor keeps exact zeros comparable.
inline double relative_gap(double analytic, double numeric, double floor = 1e-7) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline std::vector<double> randn(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

inline nnet::Grid<double> random_grid(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  nnet::Grid<double> g(c, h, w);
  g.data = randn(g.size(), seed);
  return g;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Worst relative gap between `analytic` and central differences of `f` over `values`.
inline double worst_gap(std::vector<double>& values, std::span<const double> analytic,
                        const std::function<double()>& f, double step = 1e-4) {
  if (values.size() != analytic.size()) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + step;
    const double up = f();
    values[i] = saved - step;
    const double down = f();
    values[i] = saved;
    worst = std::max(worst, relative_gap(analytic[i], (up - down) / (2 * step)));
  }
  return worst;
}

// Per-layer checks: each layer output is projected onto a fixed random
// vector r, so the scalar objective is r . layer(x) and dL/dy = r.
struct LayerGaps {
  double weights = 0.0;  // weights or gamma
  double bias = 0.0;     // bias or beta
  double input = 0.0;

  double worst() const { return std::max({weights, bias, input}); }
};

inline LayerGaps conv_gradient_gaps(std::uint64_t seed) {
  const std::size_t C = 2, F = 3;
  auto x = random_grid(C, 5, 6, seed);
  auto w = randn(F * C * 9, seed + 1);
  auto b = randn(F, seed + 2);
  const auto r = randn(F * 3 * 4, seed + 3);
  const auto f = [&] { return dot(nnet::conv2d_forward<double>(x, w, b, F).data, r); };
  nnet::Grid<double> dout(F, 3, 4);
  dout.data = r;
  std::vector<double> dw(w.size(), 0.0), db(F, 0.0);
  nnet::Grid<double> dx;
  nnet::conv2d_backward<double>(x, dout, w, dw, db, &dx);
  return {worst_gap(w, dw, f), worst_gap(b, db, f), worst_gap(x.data, dx.data, f)};
}

inline LayerGaps pool_gradient_gaps(std::uint64_t seed) {
  auto x = random_grid(2, 5, 7, seed);
  const auto r = randn(2 * 2 * 3, seed + 1);
  const auto f = [&] { return dot(nnet::maxpool2x2(x).output.data, r); };
  const auto p = nnet::maxpool2x2(x);
  nnet::Grid<double> dout(2, 2, 3);
  dout.data = r;
  const auto dx = nnet::maxpool2x2_backward<double>(dout, p.argmax, 2, 5, 7);
  return {0.0, 0.0, worst_gap(x.data, dx.data, f)};
}

inline LayerGaps batchnorm_gradient_gaps(std::uint64_t seed) {
  const std::size_t B = 4, F = 6;
  std::vector<nnet::Grid<double>> batch;
  for (std::size_t b = 0; b < B; ++b) batch.push_back(random_grid(1, 2, 3, seed + 10 + b));
  auto gamma = randn(F, seed + 1);
  auto beta = randn(F, seed + 2);
  const std::vector<double> rmean(F, 0.0), rvar(F, 1.0);
  const auto r = randn(B * F, seed + 3);
  const auto f = [&] {
    const auto y = nnet::batchnorm_forward<double>(batch, gamma, beta, rmean, rvar, 1e-5, nnet::Mode::train, nullptr);
    double s = 0.0;
    for (std::size_t b = 0; b < B; ++b) s += dot(y[b].data, std::span<const double>(r).subspan(b * F, F));
    return s;
  };
  nnet::BatchNormCache<double> cache;
  nnet::batchnorm_forward<double>(batch, gamma, beta, rmean, rvar, 1e-5, nnet::Mode::train, &cache);
  std::vector<nnet::Grid<double>> dout;
  for (std::size_t b = 0; b < B; ++b) {
    nnet::Grid<double> g(1, 2, 3);
    std::copy_n(r.begin() + static_cast<std::ptrdiff_t>(b * F), F, g.data.begin());
    dout.push_back(std::move(g));
  }
  std::vector<double> dgamma(F, 0.0), dbeta(F, 0.0);
  const auto dx = nnet::batchnorm_backward<double>(dout, cache, gamma, dgamma, dbeta);
  LayerGaps gaps{worst_gap(gamma, dgamma, f), worst_gap(beta, dbeta, f), 0.0};
  for (std::size_t b = 0; b < B; ++b) gaps.input = std::max(gaps.input, worst_gap(batch[b].data, dx[b].data, f));
  return gaps;
}

inline LayerGaps dense_gradient_gaps(std::uint64_t seed) {
  auto x = randn(5, seed);
  auto w = randn(3 * 5, seed + 1);
  auto b = randn(3, seed + 2);
  const auto r = randn(3, seed + 3);
  const auto f = [&] { return dot(nnet::dense_forward<double>(x, w, b), r); };
  std::vector<double> dw(w.size(), 0.0), db(3, 0.0), dx(5, 0.0);
  nnet::dense_backward<double>(x, r, w, dw, db, dx);
  return {worst_gap(w, dw, f), worst_gap(b, db, f), worst_gap(x, dx, f)};
}

// d BCE(sigmoid(z), y) / dz against p - y over a grid of logits.
inline double sigmoid_bce_gradient_gap(double step = 1e-4) {
  double worst = 0.0;
  for (double z : {-3.0, -0.2, 0.0, 1.7}) {
    for (double y : {0.0, 1.0}) {
      const auto f = [&](double zz) {
        const std::vector<double> p = {nnet::sigmoid(zz)};
        const std::vector<double> l = {y};
        return nnet::bce_loss<double>(p, l);
      };
      const double numeric = (f(z + step) - f(z - step)) / (2 * step);
      worst = std::max(worst, relative_gap(nnet::sigmoid(z) - y, numeric));
    }
  }
  return worst;
}

inline nnet::Architecture gradcheck_architecture(nnet::Activation hidden) {
  nnet::Architecture a;
  a.input_frames = 6;
  a.input_bins = 9;
  a.input_channels = 3;
  a.filters = 2;
  a.hidden = 3;
  a.outputs = 3;
  a.dropout_rate = 0.1;
  a.hidden_activation = hidden;
  return a;
}

// Compares backward() against (L(p + h) - L(p - h)) / 2h for every parameter,
// with L the batch BCE of a train-mode forward pass under a fixed dropout mask.
inline GradCheckResult check_network_gradients(nnet::Activation hidden, std::uint64_t seed,
                                               std::size_t batch_size = 4, double step = 1e-4) {
  const auto arch = gradcheck_architecture(hidden);
  auto model = nnet::make_model<double>(arch, seed);
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& v : model.params.bn_gamma) v = 1.0 + 0.2 * g(rng);
  for (auto& v : model.params.bn_beta) v = 0.3 * g(rng);

  std::vector<nnet::Grid<double>> batch;
  for (std::size_t b = 0; b < batch_size; ++b) {
    nnet::Grid<double> x(arch.input_channels, arch.input_frames, arch.input_bins);
    for (auto& v : x.data) v = g(rng);
    batch.push_back(std::move(x));
  }
  std::vector<double> labels(batch_size * arch.outputs);
  std::bernoulli_distribution coin(0.5);
  for (auto& y : labels) y = coin(rng) ? 1.0 : 0.0;
  const std::uint64_t dropout_seed = seed + 1;

  nnet::ForwardCache<double> cache;
  nnet::model_forward<double>(model, batch, nnet::Mode::train, &cache, dropout_seed);
  const auto grads = nnet::backward<double>(model, cache, labels);

  const auto loss = [&] {
    const auto p = nnet::model_forward<double>(model, batch, nnet::Mode::train, nullptr, dropout_seed);
    return nnet::bce_loss<double>(p, labels);
  };

  GradCheckResult out;
  auto params = model.params.tensors();
  const auto analytic = grads.tensors();
  for (std::size_t t = 0; t < nnet::kParamTensors; ++t) {
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      const double saved = params[t][i];
      params[t][i] = saved + step;
      const double up = loss();
      params[t][i] = saved - step;
      const double down = loss();
      params[t][i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      out.max_relative_error[t] = std::max(out.max_relative_error[t], relative_gap(analytic[t][i], numeric));
      ++out.parameters_checked;
    }
  }
  return out;
}

}  // namespace vibdiag::testing
