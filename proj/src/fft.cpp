#include "das/fft.hpp"

#include "das/error.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <utility>

namespace das::fft {

namespace {

// FFTW planning is not thread-safe; execution with the new-array interface is.
// Plans are made once per size with FFTW_UNALIGNED so any buffer can be used.
class PlanCache {
public:
  ~PlanCache() {
    for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
  }

  fftw_plan forward(std::size_t n) { return get(n, true); }
  fftw_plan backward(std::size_t n) { return get(n, false); }

private:
  fftw_plan get(std::size_t n, bool forward) {
    std::lock_guard lock(mutex_);
    const auto key = std::make_pair(n, forward);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    std::vector<double> real(n);
    std::vector<fftw_complex> cplx(n / 2 + 1);
    const int size = static_cast<int>(n);
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    fftw_plan plan = forward ? fftw_plan_dft_r2c_1d(size, real.data(), cplx.data(), flags)
                             : fftw_plan_dft_c2r_1d(size, cplx.data(), real.data(), flags);
    if (!plan) fail(Errc::invalid_argument, "fftw planning failed");
    plans_.emplace(key, plan);
    return plan;
  }

  std::mutex mutex_;
  std::map<std::pair<std::size_t, bool>, fftw_plan> plans_;
};

PlanCache& cache() {
  static PlanCache instance;
  return instance;
}

}  // namespace

std::vector<std::complex<double>> rfft(std::span<const double> x) {
  require(!x.empty(), "rfft of empty input");
  std::vector<double> in(x.begin(), x.end());
  std::vector<std::complex<double>> out(x.size() / 2 + 1);
  fftw_execute_dft_r2c(cache().forward(x.size()), in.data(),
                       reinterpret_cast<fftw_complex*>(out.data()));
  return out;
}

std::vector<double> irfft(std::span<const std::complex<double>> spectrum, std::size_t n) {
  require(n > 0 && spectrum.size() == n / 2 + 1, "irfft spectrum size mismatch");
  // c2r destroys its input.
  std::vector<std::complex<double>> in(spectrum.begin(), spectrum.end());
  std::vector<double> out(n);
  fftw_execute_dft_c2r(cache().backward(n), reinterpret_cast<fftw_complex*>(in.data()),
                       out.data());
  const double scale = 1.0 / static_cast<double>(n);
  for (double& v : out) v *= scale;
  return out;
}

}  // namespace das::fft
