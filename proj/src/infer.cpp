#include "das/infer.hpp"

#include "das/error.hpp"
#include "das/store.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <thread>

namespace das {

double ProbabilityMap::mean() const {
  if (p.empty()) return 0.0;
  double s = 0.0;
  for (double v : p) s += v;
  return s / static_cast<double>(p.size());
}

std::string ProbabilityMap::to_csv() const {
  std::ostringstream out;
  out.precision(9);
  out << "tile_row,tile_col,p_waves\n";
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out << r << ',' << c << ',' << at(r, c) << '\n';
  return out.str();
}

Batch<float> make_batch(std::span<const Tile> tiles) {
  require(!tiles.empty(), "no tiles to batch");
  const std::size_t t = tiles[0].tile_size;
  Batch<float> batch(tiles.size(), 1, t, t);
  std::vector<std::uint8_t> gray(t * t);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    require(tiles[i].tile_size == t, "tiles in a batch must share one size");
    gray_pixels(tiles[i].values, gray);
    auto dst = batch.sample(i);
    for (std::size_t k = 0; k < gray.size(); ++k) dst[k] = static_cast<float>(gray[k]) / 255.0f;
  }
  return batch;
}

ProbabilityMap infer_segment(const ResNet<float>& model, const DasSegment& segment, std::size_t tile_size,
                             std::size_t stride, const std::string& source, std::size_t batch_size) {
  if (model.config().input_size != tile_size)
    fail(Errc::shape_mismatch, "model input size " + std::to_string(model.config().input_size) +
                                   " does not match tile size " + std::to_string(tile_size));
  require(batch_size > 0, "batch size must be positive");
  const TileGrid grid = tile_grid(segment.n_channels(), segment.n_samples(), tile_size, stride);
  const std::vector<Tile> tiles = tile_segment(segment, tile_size, stride, source);
  ProbabilityMap map;
  map.rows = grid.rows;
  map.cols = grid.cols;
  map.tile_size = tile_size;
  map.stride = stride;
  map.source = source;
  map.p.reserve(tiles.size());
  for (std::size_t b0 = 0; b0 < tiles.size(); b0 += batch_size) {
    const std::size_t nb = std::min(batch_size, tiles.size() - b0);
    const auto probs = predict_proba(model, make_batch(std::span(tiles).subspan(b0, nb)));
    map.p.insert(map.p.end(), probs.begin(), probs.end());
  }
  return map;
}

ProbabilityMap infer_overlapping(const ResNet<float>& model, const DasSegment& segment, std::size_t stride,
                                 const std::string& source) {
  if (model.config().input_size != 50)
    fail(Errc::shape_mismatch, "overlapping inference needs a 50x50 model, got input size " +
                                   std::to_string(model.config().input_size));
  require(stride >= 1 && stride <= 50, "stride must lie in [1, 50]");
  return infer_segment(model, segment, 50, stride, source);
}

std::vector<ScanRow> scan_corpus(const ResNet<float>& model, std::span<const fs::path> files,
                                 std::size_t tile_size, std::size_t stride, std::size_t n_workers) {
  if (model.config().input_size != tile_size)
    fail(Errc::shape_mismatch, "model input size " + std::to_string(model.config().input_size) +
                                   " does not match tile size " + std::to_string(tile_size));
  std::vector<ScanRow> rows(files.size());
  const auto scan_one = [&](const ResNet<float>& m, std::size_t i) {
    rows[i].path = files[i].string();
    try {
      const DasSegment seg = read_segment(files[i]);
      const ProbabilityMap map = infer_segment(m, seg, tile_size, stride, files[i].filename().string());
      rows[i].mean_p = map.mean();
      rows[i].n_tiles = map.p.size();
    } catch (const std::exception& e) {
      rows[i].error = e.what();
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(n_workers, 1, std::max<std::size_t>(1, files.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < files.size(); ++i) scan_one(model, i);
    return rows;
  }
  std::atomic<std::size_t> next{0};
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, copy = model]() {
        for (std::size_t i = next.fetch_add(1); i < files.size(); i = next.fetch_add(1)) scan_one(copy, i);
      });
  }
  return rows;
}

std::string scan_csv(std::span<const ScanRow> rows) {
  const auto quote = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char ch : s) {
      if (ch == '"') q += '"';
      q += ch == '\n' ? ' ' : ch;
    }
    return q + "\"";
  };
  std::ostringstream out;
  out.precision(9);
  out << "path,mean_p,n_tiles,error\n";
  for (const auto& r : rows) {
    out << quote(r.path) << ',';
    if (r.ok()) out << r.mean_p;
    out << ',' << r.n_tiles << ',' << quote(r.error) << '\n';
  }
  return out.str();
}

std::string DailyCurve::to_csv() const {
  std::ostringstream out;
  out.precision(9);
  out << "index,raw_mean,smoothed\n";
  for (std::size_t i = 0; i < smoothed.size(); ++i) out << i << ',' << downsampled[i] << ',' << smoothed[i] << '\n';
  return out.str();
}

std::vector<double> gaussian_kernel(double sigma) {
  require(sigma >= 0.0 && std::isfinite(sigma), "kernel sigma must be non-negative");
  if (sigma == 0.0) return {1.0};
  const auto radius = static_cast<long>(std::ceil(4.0 * sigma));
  std::vector<double> w(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (long k = -radius; k <= radius; ++k) {
    const double v = std::exp(-0.5 * static_cast<double>(k * k) / (sigma * sigma));
    w[static_cast<std::size_t>(k + radius)] = v;
    total += v;
  }
  for (double& v : w) v /= total;
  return w;
}

namespace {

// Half-sample symmetric reflection: -1 -> 0, n -> n - 1.
std::size_t reflect(long i, long n) {
  const long period = 2 * n;
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < n ? m : period - 1 - m);
}

}  // namespace

DailyCurve daily_curve(std::span<const double> values, std::size_t factor, double kernel_sigma) {
  require(!values.empty(), "daily curve needs at least one value");
  require(factor >= 1, "downsample factor must be at least 1");
  DailyCurve curve;
  curve.factor = factor;
  curve.kernel_sigma = kernel_sigma;
  const std::size_t n = (values.size() + factor - 1) / factor;
  curve.downsampled.resize(n);
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t begin = b * factor;
    const std::size_t end = std::min(values.size(), begin + factor);
    // Mean as offset from the first value so constant blocks stay exact.
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) s += values[i] - values[begin];
    curve.downsampled[b] = values[begin] + s / static_cast<double>(end - begin);
  }
  const auto kernel = gaussian_kernel(kernel_sigma);
  const long radius = static_cast<long>(kernel.size() / 2);
  const auto& x = curve.downsampled;
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  curve.smoothed.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    // Deviation form keeps constant input exact.
    double acc = 0.0;
    for (long k = -radius; k <= radius; ++k)
      acc += kernel[static_cast<std::size_t>(k + radius)] *
             (x[reflect(static_cast<long>(i) + k, static_cast<long>(n))] - x[i]);
    curve.smoothed[i] = std::clamp(x[i] + acc, *lo, *hi);
  }
  return curve;
}

void write_probability_pgm(const ProbabilityMap& map, const fs::path& path) {
  std::vector<std::uint8_t> px(map.p.size());
  for (std::size_t i = 0; i < px.size(); ++i)
    px[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(map.p[i], 0.0, 1.0)));
  write_pgm(path, map.cols, map.rows, px);
}

}  // namespace das
