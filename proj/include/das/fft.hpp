#pragma once

#include <complex>
#include <span>
#include <vector>

namespace das::fft {

// Unnormalized forward real transform: bins 0..n/2 of sum_n x_n e^{-2 pi i k n / N}.
std::vector<std::complex<double>> rfft(std::span<const double> x);

// Inverse of rfft, including the 1/N factor. `spectrum` holds n/2 + 1 bins.
std::vector<double> irfft(std::span<const std::complex<double>> spectrum, std::size_t n);

}  // namespace das::fft
