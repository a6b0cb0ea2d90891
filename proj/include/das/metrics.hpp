#pragma once

#include "das/segment.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace das {

inline constexpr std::size_t kDefaultHistogramBins = 201;

struct Histogram {
  std::vector<double> bin_edges;
  std::vector<std::size_t> counts;
  std::vector<double> density;  // counts / (total * bin width)

  std::size_t n_bins() const { return counts.size(); }
  std::vector<double> centers() const;
  double total() const;
};

// Equal-width bins spanning [min, max]; the maximum lands in the last bin.
Histogram histogram(std::span<const double> values, std::size_t n_bins = kDefaultHistogramBins);
Histogram histogram(const RegionView& region, std::size_t n_bins = kDefaultHistogramBins);

// (1/df) * sum (y_i - f_i)^2 with df = len(y) - n_params.
double reduced_chi_square(std::span<const double> y, std::span<const double> f,
                          std::size_t n_params);

struct GaussianComponent {
  double amplitude = 0.0;
  double mean = 0.0;
  double sigma = 1.0;

  double operator()(double x) const;
};

struct GaussianFitReport {
  std::vector<GaussianComponent> components;  // ascending sigma
  double chi2_red = 0.0;
  double rss = 0.0;
  std::size_t df = 0;
  std::size_t iterations = 0;
  bool converged = false;

  double model(double x) const;
};

struct FitOptions {
  std::size_t max_iterations = 500;
  double tolerance = 1e-12;
};

// Initial guess used when none is supplied: component 1 from the median and the
// interquartile spread of the histogram mass; component 2 (double fit) shares
// the mean with 4x the sigma and 10% of the amplitude.
std::vector<GaussianComponent> default_gaussian_init(const Histogram& hist,
                                                     std::size_t n_components);

// Levenberg-Marquardt fit of a sum of Gaussians to the histogram density.
GaussianFitReport fit_gaussians(const Histogram& hist, std::size_t n_components,
                                std::optional<std::vector<GaussianComponent>> init = std::nullopt,
                                FitOptions options = {});

struct ChannelSpectra {
  std::size_t n_channels = 0;
  std::size_t n_samples = 0;
  double sample_rate_hz = 0.0;
  std::vector<double> freqs;       // k * fs / N for k = 1..N/2
  std::vector<double> amplitudes;  // n_channels x freqs.size(), row-major

  std::span<const double> channel(std::size_t c) const {
    return {amplitudes.data() + c * freqs.size(), freqs.size()};
  }
};

struct SpectralSummary {
  std::vector<double> freqs;
  std::vector<double> avg_amplitude;
  std::size_t n_channels = 0;
  std::size_t n_samples = 0;
};

// |sum_n x_n e^{-2 pi i k n / N}| for k = 1..N/2, per channel.
ChannelSpectra channel_spectra(const RegionView& region, double sample_rate_hz);
SpectralSummary average_spectral_amplitude(const ChannelSpectra& spectra);

// Population standard deviation of all values.
double region_sigma(const RegionView& region);
double population_sigma(std::span<const double> values);

}  // namespace das
