// SPDX-License-Identifier: Apache-2.0

#include "vibdiag/fft.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace vibdiag::fft {

namespace {

std::vector<std::size_t> factorize(std::size_t n) {
  std::vector<std::size_t> primes;
  std::size_t rem = n;
  while (rem % 4 == 0) {
    primes.push_back(4);
    rem /= 4;
  }
  while (rem % 2 == 0) {
    primes.push_back(2);
    rem /= 2;
  }
  for (std::size_t p = 3; p * p <= rem; p += 2) {
    while (rem % p == 0) {
      primes.push_back(p);
      rem /= p;
    }
  }
  if (rem > 1) primes.push_back(rem);
  return primes;
}

std::size_t next_pow2(std::size_t v) {
  std::size_t p = 1;
  while (p < v) p <<= 1;
  return p;
}

}  // namespace

struct Plan::Bluestein {
  std::size_t m = 0;
  std::unique_ptr<Plan> sub;
  std::vector<Complex> chirp;     // exp(-i pi k^2 / n), k < n
  std::vector<Complex> kernel;    // FFT of the conjugate chirp, length m
};

Plan::Plan(std::size_t n) : n_(n) {
  if (n == 0) throw std::invalid_argument("fft::Plan: length must be positive");
  const auto primes = factorize(n);
  if (primes.empty()) return;  // n == 1: the transform is the identity
  if (primes.back() > kMaxDirectRadix && primes.back() != 4) {
    auto b = std::make_unique<Bluestein>();
    b->m = next_pow2(2 * n - 1);
    b->sub = std::make_unique<Plan>(b->m);
    b->chirp.resize(n);
    const std::size_t two_n = 2 * n;
    for (std::size_t k = 0; k < n; ++k) {
      // k^2 mod 2n keeps the angle argument small.
      const std::size_t k2 = static_cast<std::size_t>((static_cast<unsigned __int128>(k) * k) % two_n);
      const double angle = -std::numbers::pi * static_cast<double>(k2) / static_cast<double>(n);
      b->chirp[k] = {std::cos(angle), std::sin(angle)};
    }
    b->kernel.assign(b->m, Complex{});
    b->kernel[0] = std::conj(b->chirp[0]);
    for (std::size_t k = 1; k < n; ++k) {
      b->kernel[k] = std::conj(b->chirp[k]);
      b->kernel[b->m - k] = std::conj(b->chirp[k]);
    }
    b->sub->forward(b->kernel);
    bluestein_ = std::move(b);
    return;
  }
  std::size_t rem = n;
  for (std::size_t p : primes) {
    rem /= p;
    factors_.push_back(p);
    factors_.push_back(rem);
  }
  twiddles_.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double angle = -2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n);
    twiddles_[j] = {std::cos(angle), std::sin(angle)};
  }
}

Plan::~Plan() = default;
Plan::Plan(Plan&&) noexcept = default;
Plan& Plan::operator=(Plan&&) noexcept = default;

void Plan::forward(std::span<Complex> data) const {
  if (data.size() != n_) throw std::invalid_argument("fft::Plan::forward: length mismatch");
  if (bluestein_) {
    const Bluestein& b = *bluestein_;
    std::vector<Complex> a(b.m, Complex{});
    for (std::size_t k = 0; k < n_; ++k) a[k] = data[k] * b.chirp[k];
    b.sub->forward(a);
    for (std::size_t k = 0; k < b.m; ++k) a[k] = std::conj(a[k] * b.kernel[k]);
    b.sub->forward(a);  // conj(FFT(conj(.))) = m * IFFT(.)
    const double inv_m = 1.0 / static_cast<double>(b.m);
    for (std::size_t k = 0; k < n_; ++k) data[k] = std::conj(a[k]) * inv_m * b.chirp[k];
    return;
  }
  if (factors_.empty()) return;
  std::vector<Complex> in(data.begin(), data.end());
  mixed_radix(data.data(), in.data());
}

std::vector<Complex> Plan::forward_real(std::span<const double> x) const {
  std::vector<Complex> out(x.begin(), x.end());
  forward(out);
  return out;
}

void Plan::mixed_radix(Complex* out, const Complex* in) const { work(out, in, 1, 0); }

void Plan::work(Complex* out, const Complex* in, std::size_t fstride, std::size_t stage) const {
  const std::size_t p = factors_[2 * stage];
  const std::size_t m = factors_[2 * stage + 1];
  if (m == 1) {
    for (std::size_t q = 0; q < p; ++q) out[q] = in[q * fstride];
  } else {
    for (std::size_t q = 0; q < p; ++q) work(out + q * m, in + q * fstride, fstride * p, stage + 1);
  }
  butterfly(out, fstride, p, m);
}

void Plan::butterfly(Complex* out, std::size_t fstride, std::size_t p, std::size_t m) const {
  const Complex* tw = twiddles_.data();
  if (p == 2) {
    for (std::size_t k = 0; k < m; ++k) {
      const Complex t = out[k + m] * tw[k * fstride];
      out[k + m] = out[k] - t;
      out[k] += t;
    }
    return;
  }
  if (p == 4) {
    for (std::size_t k = 0; k < m; ++k) {
      const Complex s0 = out[k + m] * tw[k * fstride];
      const Complex s1 = out[k + 2 * m] * tw[2 * k * fstride];
      const Complex s2 = out[k + 3 * m] * tw[3 * k * fstride];
      const Complex s5 = out[k] - s1;
      const Complex a = out[k] + s1;
      const Complex s3 = s0 + s2;
      const Complex s4 = s0 - s2;
      out[k] = a + s3;
      out[k + 2 * m] = a - s3;
      out[k + m] = {s5.real() + s4.imag(), s5.imag() - s4.real()};
      out[k + 3 * m] = {s5.real() - s4.imag(), s5.imag() + s4.real()};
    }
    return;
  }
  // Generic odd radix, O(p^2) per output group.
  std::vector<Complex> t(p);
  const std::size_t n = n_;
  for (std::size_t k = 0; k < m; ++k) {
    for (std::size_t q = 0; q < p; ++q) t[q] = out[k + q * m] * tw[(q * k * fstride) % n];
    for (std::size_t s = 0; s < p; ++s) {
      Complex acc = t[0];
      const std::size_t step = s * fstride * m;
      std::size_t idx = 0;
      for (std::size_t q = 1; q < p; ++q) {
        idx += step;
        if (idx >= n) idx -= n;
        acc += t[q] * tw[idx];
      }
      out[k + s * m] = acc;
    }
  }
}

std::vector<Complex> transform(std::span<const Complex> x) {
  Plan plan(x.size());
  std::vector<Complex> out(x.begin(), x.end());
  plan.forward(out);
  return out;
}

}  // namespace vibdiag::fft
