// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include "support/gradcheck.hpp"
#include "vibdiag/nnet.hpp"

using namespace vibdiag;

namespace {

constexpr double kTolerance = 1e-4;

void check_gaps(const testing::LayerGaps& g) {
  INFO("weights " << g.weights << ", bias " << g.bias << ", input " << g.input);
  CHECK(g.worst() < kTolerance);
}

}  // namespace

TEST_CASE("conv2d gradients match finite differences", "[gradients]") {
  for (std::uint64_t seed : {1u, 2u, 3u}) check_gaps(testing::conv_gradient_gaps(seed));
}

TEST_CASE("maxpool gradients match finite differences", "[gradients]") {
  for (std::uint64_t seed : {5u, 6u, 7u}) check_gaps(testing::pool_gradient_gaps(seed));
}

TEST_CASE("batchnorm gradients match finite differences", "[gradients]") {
  for (std::uint64_t seed : {20u, 40u, 60u}) check_gaps(testing::batchnorm_gradient_gaps(seed));
}

TEST_CASE("dense gradients match finite differences", "[gradients]") {
  for (std::uint64_t seed : {30u, 31u}) check_gaps(testing::dense_gradient_gaps(seed));
}

TEST_CASE("sigmoid plus cross-entropy gradient is p - y", "[gradients]") {
  CHECK(testing::sigmoid_bce_gradient_gap() < kTolerance);
}

TEST_CASE("whole-network gradients match finite differences (linear hidden)", "[gradients]") {
  for (std::uint64_t seed : {7u, 9u}) {
    const auto r = testing::check_network_gradients(nnet::Activation::linear, seed);
    for (std::size_t t = 0; t < nnet::kParamTensors; ++t) {
      INFO(nnet::kParamNames[t] << ": " << r.max_relative_error[t]);
      CHECK(r.max_relative_error[t] < kTolerance);
    }
    CHECK(r.parameters_checked > 100);
  }
}

TEST_CASE("whole-network gradients match finite differences (ReLU hidden)", "[gradients]") {
  for (std::uint64_t seed : {8u, 10u}) {
    const auto r = testing::check_network_gradients(nnet::Activation::relu, seed);
    for (std::size_t t = 0; t < nnet::kParamTensors; ++t) {
      INFO(nnet::kParamNames[t] << ": " << r.max_relative_error[t]);
      CHECK(r.max_relative_error[t] < kTolerance);
    }
  }
}
