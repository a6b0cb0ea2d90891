#include "das/metrics.hpp"

#include "das/error.hpp"
#include "das/fft.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace das {

std::vector<double> Histogram::centers() const {
  std::vector<double> c(n_bins());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = 0.5 * (bin_edges[i] + bin_edges[i + 1]);
  return c;
}

double Histogram::total() const {
  return static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
}

Histogram histogram(std::span<const double> values, std::size_t n_bins) {
  require(!values.empty(), "histogram of empty region");
  require(n_bins >= 2, "histogram needs at least 2 bins");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  require(std::isfinite(lo) && std::isfinite(hi), "histogram values must be finite");
  require(hi > lo, "histogram of constant region (zero range)");

  Histogram h;
  const double width = (hi - lo) / static_cast<double>(n_bins);
  h.bin_edges.resize(n_bins + 1);
  for (std::size_t i = 0; i <= n_bins; ++i) h.bin_edges[i] = lo + width * static_cast<double>(i);
  h.bin_edges.back() = hi;
  h.counts.assign(n_bins, 0);
  for (double v : values) {
    auto idx = static_cast<std::size_t>((v - lo) / width);
    if (idx >= n_bins) idx = n_bins - 1;
    ++h.counts[idx];
  }
  const double norm = static_cast<double>(values.size());
  h.density.resize(n_bins);
  for (std::size_t i = 0; i < n_bins; ++i)
    h.density[i] = static_cast<double>(h.counts[i]) / (norm * (h.bin_edges[i + 1] - h.bin_edges[i]));
  return h;
}

Histogram histogram(const RegionView& region, std::size_t n_bins) {
  const std::vector<double> flat = region.flatten();
  return histogram(flat, n_bins);
}

double reduced_chi_square(std::span<const double> y, std::span<const double> f,
                          std::size_t n_params) {
  require(y.size() == f.size(), "reduced_chi_square: length mismatch");
  if (y.size() <= n_params) fail(Errc::invalid_argument, "reduced_chi_square: df <= 0");
  double sum = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = y[i] - f[i];
    sum += r * r;
  }
  return sum / static_cast<double>(y.size() - n_params);
}

double GaussianComponent::operator()(double x) const {
  const double z = (x - mean) / sigma;
  return amplitude * std::exp(-0.5 * z * z);
}

double GaussianFitReport::model(double x) const {
  double v = 0.0;
  for (const auto& c : components) v += c(x);
  return v;
}

namespace {

// Linear interpolation of the histogram's cumulative mass.
double histogram_quantile(const Histogram& h, double q) {
  const double total = h.total();
  const double target = q * total;
  double cum = 0.0;
  for (std::size_t i = 0; i < h.n_bins(); ++i) {
    const double next = cum + static_cast<double>(h.counts[i]);
    if (next >= target && h.counts[i] > 0) {
      const double frac = (target - cum) / static_cast<double>(h.counts[i]);
      return h.bin_edges[i] + frac * (h.bin_edges[i + 1] - h.bin_edges[i]);
    }
    cum = next;
  }
  return h.bin_edges.back();
}

}  // namespace

std::vector<GaussianComponent> default_gaussian_init(const Histogram& hist,
                                                     std::size_t n_components) {
  require(n_components == 1 || n_components == 2, "n_components must be 1 or 2");
  GaussianComponent narrow;
  narrow.amplitude = *std::max_element(hist.density.begin(), hist.density.end());
  if (hist.total() > 0.0) {
    narrow.mean = histogram_quantile(hist, 0.5);
    const double iqr = histogram_quantile(hist, 0.75) - histogram_quantile(hist, 0.25);
    narrow.sigma = iqr / 1.3489795003921634;
  } else {
    // Density-only histogram (no counts): weight centers by density.
    const auto c = hist.centers();
    double w = 0.0, m = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      w += hist.density[i];
      m += hist.density[i] * c[i];
    }
    m /= w;
    for (std::size_t i = 0; i < c.size(); ++i) s2 += hist.density[i] * (c[i] - m) * (c[i] - m);
    narrow.mean = m;
    narrow.sigma = std::sqrt(s2 / w);
  }
  if (!(narrow.sigma > 0.0)) narrow.sigma = hist.bin_edges[1] - hist.bin_edges[0];
  if (n_components == 1) return {narrow};
  GaussianComponent broad{0.1 * narrow.amplitude, narrow.mean, 4.0 * narrow.sigma};
  return {narrow, broad};
}

GaussianFitReport fit_gaussians(const Histogram& hist,
                                std::size_t n_components,
                                std::optional<std::vector<GaussianComponent>> init,
                                FitOptions options) {
  require(n_components == 1 || n_components == 2, "n_components must be 1 or 2");
  require(hist.n_bins() >= 2 && hist.density.size() == hist.n_bins() &&
              hist.bin_edges.size() == hist.n_bins() + 1,
          "invalid histogram");
  const std::size_t n_params = 3 * n_components;
  if (hist.n_bins() <= n_params) fail(Errc::invalid_argument, "too few bins for fit (df <= 0)");
  std::vector<GaussianComponent> start = init ? *init : default_gaussian_init(hist, n_components);
  require(start.size() == n_components, "init size must equal n_components");
  for (const auto& c : start) require(c.sigma > 0.0, "init sigmas must be positive");

  // Work in standardized units so the normal equations are well scaled.
  const std::vector<double> x_raw = hist.centers();
  const double x_shift = 0.5 * (hist.bin_edges.front() + hist.bin_edges.back());
  const double x_scale = 0.5 * (hist.bin_edges.back() - hist.bin_edges.front());
  double y_scale = *std::max_element(hist.density.begin(), hist.density.end());
  if (!(y_scale > 0.0)) y_scale = 1.0;

  const auto n = static_cast<Eigen::Index>(x_raw.size());
  Eigen::VectorXd x(n), y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    x[i] = (x_raw[static_cast<std::size_t>(i)] - x_shift) / x_scale;
    y[i] = hist.density[static_cast<std::size_t>(i)] / y_scale;
  }
  Eigen::VectorXd p(static_cast<Eigen::Index>(n_params));
  for (std::size_t k = 0; k < n_components; ++k) {
    p[3 * k] = start[k].amplitude / y_scale;
    p[3 * k + 1] = (start[k].mean - x_shift) / x_scale;
    p[3 * k + 2] = start[k].sigma / x_scale;
  }

  const auto residuals = [&](const Eigen::VectorXd& q, Eigen::VectorXd& r, Eigen::MatrixXd* jac) {
    r = y;
    if (jac) jac->resize(n, q.size());
    for (Eigen::Index i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < n_components; ++k) {
        const auto b = static_cast<Eigen::Index>(3 * k);
        const double a = q[b], m = q[b + 1], s = q[b + 2];
        const double d = x[i] - m;
        const double e = std::exp(-0.5 * d * d / (s * s));
        r[i] -= a * e;
        if (jac) {
          (*jac)(i, b) = e;
          (*jac)(i, b + 1) = a * e * d / (s * s);
          (*jac)(i, b + 2) = a * e * d * d / (s * s * s);
        }
      }
    }
    return r.squaredNorm();
  };

  Eigen::VectorXd r, r_trial;
  Eigen::MatrixXd jac;
  double rss = residuals(p, r, &jac);
  double lambda = 1e-3;
  bool converged = false;
  std::size_t iter = 0;
  for (; iter < options.max_iterations && !converged; ++iter) {
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    const Eigen::VectorXd g = jac.transpose() * r;
    bool accepted = false;
    while (!accepted) {
      Eigen::MatrixXd damped = jtj;
      for (Eigen::Index d = 0; d < damped.rows(); ++d)
        damped(d, d) += lambda * std::max(jtj(d, d), 1e-12);
      const Eigen::VectorXd step = damped.ldlt().solve(g);
      Eigen::VectorXd trial = p + step;
      bool valid = step.allFinite();
      for (std::size_t k = 0; k < n_components && valid; ++k) valid = trial[3 * k + 2] > 0.0;
      const double trial_rss = valid ? residuals(trial, r_trial, nullptr) : INFINITY;
      if (valid && trial_rss < rss) {
        const double drop = rss - trial_rss;
        p = trial;
        rss = residuals(p, r, &jac);
        lambda = std::max(lambda * 0.1, 1e-15);
        accepted = true;
        if (drop <= options.tolerance * rss || step.norm() <= 1e-14 * (p.norm() + 1e-14))
          converged = true;
      } else {
        lambda *= 10.0;
        if (lambda > 1e16) {
          // No descent direction left at any damping: stationary point.
          converged = true;
          break;
        }
      }
    }
  }

  GaussianFitReport report;
  for (std::size_t k = 0; k < n_components; ++k) {
    report.components.push_back({p[3 * k] * y_scale, p[3 * k + 1] * x_scale + x_shift,
                                 std::abs(p[3 * k + 2]) * x_scale});
  }
  std::sort(report.components.begin(), report.components.end(),
            [](const auto& a, const auto& b) { return a.sigma < b.sigma; });
  std::vector<double> fitted(x_raw.size());
  for (std::size_t i = 0; i < x_raw.size(); ++i) fitted[i] = report.model(x_raw[i]);
  report.chi2_red = reduced_chi_square(hist.density, fitted, n_params);
  report.df = hist.n_bins() - n_params;
  report.rss = report.chi2_red * static_cast<double>(report.df);
  report.iterations = iter;
  report.converged = converged;
  return report;
}

ChannelSpectra channel_spectra(const RegionView& region, double sample_rate_hz) {
  require(region.cols >= 2, "channel_spectra needs at least 2 samples per channel");
  require(sample_rate_hz > 0.0, "sample rate must be positive");
  ChannelSpectra out;
  out.n_channels = region.rows;
  out.n_samples = region.cols;
  out.sample_rate_hz = sample_rate_hz;
  const std::size_t n = region.cols;
  const std::size_t n_bins = n / 2;
  out.freqs.resize(n_bins);
  for (std::size_t k = 1; k <= n_bins; ++k)
    out.freqs[k - 1] = static_cast<double>(k) * sample_rate_hz / static_cast<double>(n);
  out.amplitudes.resize(region.rows * n_bins);
  std::vector<double> buf(n);
  for (std::size_t c = 0; c < region.rows; ++c) {
    const auto row = region.row(c);
    std::copy(row.begin(), row.end(), buf.begin());
    const auto spec = fft::rfft(buf);
    for (std::size_t k = 1; k <= n_bins; ++k) out.amplitudes[c * n_bins + k - 1] = std::abs(spec[k]);
  }
  return out;
}

SpectralSummary average_spectral_amplitude(const ChannelSpectra& spectra) {
  require(spectra.n_channels >= 1, "need at least one channel");
  SpectralSummary s;
  s.freqs = spectra.freqs;
  s.n_channels = spectra.n_channels;
  s.n_samples = spectra.n_samples;
  s.avg_amplitude.assign(spectra.freqs.size(), 0.0);
  for (std::size_t c = 0; c < spectra.n_channels; ++c) {
    const auto row = spectra.channel(c);
    for (std::size_t k = 0; k < row.size(); ++k) s.avg_amplitude[k] += row[k];
  }
  const double inv = 1.0 / static_cast<double>(spectra.n_channels);
  for (double& v : s.avg_amplitude) v *= inv;
  return s;
}

double population_sigma(std::span<const double> values) {
  require(!values.empty(), "sigma of empty region");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(values.size()));
}

double region_sigma(const RegionView& region) {
  require(region.size() > 0, "sigma of empty region");
  double mean = 0.0;
  for (std::size_t r = 0; r < region.rows; ++r)
    for (float v : region.row(r)) mean += v;
  mean /= static_cast<double>(region.size());
  double ss = 0.0;
  for (std::size_t r = 0; r < region.rows; ++r)
    for (float v : region.row(r)) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(region.size()));
}

}  // namespace das
