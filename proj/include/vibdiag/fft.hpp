// SPDX-License-Identifier: Apache-2.0
//
// Forward complex DFT for arbitrary lengths. Lengths whose prime factors are
// all small use a recursive mixed-radix Cooley-Tukey decomposition (radix 4
// and 2 specialised, other small primes through a generic butterfly); any
// length with a prime factor above kMaxDirectRadix goes through Bluestein's
// chirp-z algorithm on a power-of-two plan.
//
// Convention: X[k] = sum_n x[n] exp(-2 pi i n k / N), no normalisation.

#pragma once

#include <complex>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

namespace vibdiag::fft {

using Complex = std::complex<double>;

inline constexpr std::size_t kMaxDirectRadix = 64;

class Plan {
 public:
  explicit Plan(std::size_t n);
  ~Plan();
  Plan(Plan&&) noexcept;
  Plan& operator=(Plan&&) noexcept;

  std::size_t size() const { return n_; }

  // In-place forward transform; data.size() must equal size().
  void forward(std::span<Complex> data) const;

  // Forward transform of a real sequence (zero imaginary parts).
  std::vector<Complex> forward_real(std::span<const double> x) const;

  // True when the plan uses the chirp-z path.
  bool uses_bluestein() const { return bluestein_ != nullptr; }

 private:
  struct Bluestein;

  void mixed_radix(Complex* out, const Complex* in) const;
  void work(Complex* out, const Complex* in, std::size_t fstride, std::size_t stage) const;
  void butterfly(Complex* out, std::size_t fstride, std::size_t p, std::size_t m) const;

  std::size_t n_ = 0;
  std::vector<std::size_t> factors_;  // (radix, remaining length) pairs
  std::vector<Complex> twiddles_;
  std::unique_ptr<Bluestein> bluestein_;
};

// Convenience wrapper that builds a throwaway plan.
std::vector<Complex> transform(std::span<const Complex> x);

}  // namespace vibdiag::fft
