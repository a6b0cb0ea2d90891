#pragma once

#include "das/resnet.hpp"
#include "das/segment.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace das {

namespace fs = std::filesystem;

// p(waves) per tile; row = channel block, col = sample block.
struct ProbabilityMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t tile_size = 0;
  std::size_t stride = 0;
  std::vector<double> p;
  std::string source;

  double at(std::size_t r, std::size_t c) const { return p[r * cols + c]; }
  double mean() const;
  std::string to_csv() const;  // tile_row,tile_col,p_waves
};

// [n, 1, T, T] batch of grayscale tiles scaled to [0, 1], using the same
// min-max mapping as the training export.
Batch<float> make_batch(std::span<const Tile> tiles);

ProbabilityMap infer_segment(const ResNet<float>& model, const DasSegment& segment,
                             std::size_t tile_size, std::size_t stride,
                             const std::string& source = {}, std::size_t batch_size = 150);

// Dense map from a 50x50 model with 1 <= stride <= 50.
ProbabilityMap infer_overlapping(const ResNet<float>& model, const DasSegment& segment,
                                 std::size_t stride, const std::string& source = {});

struct ScanRow {
  std::string path;
  double mean_p = 0.0;
  std::size_t n_tiles = 0;
  std::string error;  // empty on success

  bool ok() const { return error.empty(); }
};

// Files are claimed by a pool of workers, each with its own model copy;
// rows come back in input order. Unreadable files become error rows.
std::vector<ScanRow> scan_corpus(const ResNet<float>& model, std::span<const fs::path> files,
                                 std::size_t tile_size, std::size_t stride, std::size_t n_workers);
std::string scan_csv(std::span<const ScanRow> rows);  // path,mean_p,n_tiles,error

struct DailyCurve {
  std::size_t factor = 10;
  double kernel_sigma = 6.0;
  std::vector<double> downsampled;  // block means, length ceil(n / factor)
  std::vector<double> smoothed;

  std::string to_csv() const;  // index,raw_mean,smoothed
};

// Normalized Gaussian truncated at 4 sigma; entry k is the weight at offset
// k - radius.
std::vector<double> gaussian_kernel(double sigma);

// Block-mean downsample (last block may be short), then Gaussian smoothing
// with half-sample symmetric reflection at both ends.
DailyCurve daily_curve(std::span<const double> per_file_means, std::size_t factor = 10,
                       double kernel_sigma = 6.0);

// Grayscale heat map, one pixel per tile, 255 = p of 1.
void write_probability_pgm(const ProbabilityMap& map, const fs::path& path);

}  // namespace das
