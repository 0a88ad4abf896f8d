#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace hmr::fft {

// In-place DFT of arbitrary length: iterative radix-2 for powers of two,
// Bluestein's chirp-z reduction otherwise. The inverse transform applies
// the 1/N scale. All arithmetic is double precision regardless of the
// tensor precision in use.
void transform(std::vector<std::complex<double>>& a, bool inverse);

bool is_power_of_two(std::size_t n);

// Circular convolution (x (*) y)_j = sum_k x_k y_{(j-k) mod d} in the
// frequency domain. out may not alias x or y.
void circ_conv(std::span<const double> x, std::span<const double> y, std::span<double> out);

// Circular correlation corr(x,y)_k = sum_j x_j y_{(j-k) mod d}.
void circ_corr(std::span<const double> x, std::span<const double> y, std::span<double> out);

// Batched row-wise variants: out[r] = x[r] (*) y[r] (or corr) for `rows`
// contiguous rows of width d. Plans and scratch are resolved once per
// batch, which is what makes per-token binding affordable.
template <class T>
void circ_conv_batch(const T* x, const T* y, T* out, std::size_t rows, std::size_t d);
template <class T>
void circ_corr_batch(const T* x, const T* y, T* out, std::size_t rows, std::size_t d);

}  // namespace hmr::fft
