#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace das {

struct SegmentInfo {
  double sample_rate_hz = 500.0;
  std::int64_t channel_start = 0;
  double channel_spacing_m = 2.0;
  std::int64_t start_time_ns = 0;

  friend bool operator==(const SegmentInfo&, const SegmentInfo&) = default;
};

// Read-only window into a row-major (channel-major) array.
struct RegionView {
  const float* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t stride = 0;

  float operator()(std::size_t r, std::size_t c) const { return data[r * stride + c]; }
  std::span<const float> row(std::size_t r) const { return {data + r * stride, cols}; }
  std::size_t size() const { return rows * cols; }
  std::vector<double> flatten() const;
};

// Strain-rate block, rows = channels, columns = time samples.
class DasSegment {
public:
  DasSegment() = default;
  DasSegment(std::size_t n_channels, std::size_t n_samples, SegmentInfo info = {});
  DasSegment(std::size_t n_channels, std::size_t n_samples, std::vector<float> data,
             SegmentInfo info = {});

  std::size_t n_channels() const { return n_channels_; }
  std::size_t n_samples() const { return n_samples_; }
  const SegmentInfo& info() const { return info_; }
  SegmentInfo& info() { return info_; }

  float& at(std::size_t channel, std::size_t sample) { return data_[channel * n_samples_ + sample]; }
  float at(std::size_t channel, std::size_t sample) const { return data_[channel * n_samples_ + sample]; }
  std::span<float> channel(std::size_t c) { return {data_.data() + c * n_samples_, n_samples_}; }
  std::span<const float> channel(std::size_t c) const { return {data_.data() + c * n_samples_, n_samples_}; }
  std::span<const float> values() const { return data_; }
  std::span<float> values() { return data_; }

  RegionView region(std::size_t channel0, std::size_t sample0, std::size_t rows,
                    std::size_t cols) const;
  RegionView whole() const { return region(0, 0, n_channels_, n_samples_); }

  bool all_finite() const;

  friend bool operator==(const DasSegment&, const DasSegment&) = default;

private:
  std::size_t n_channels_ = 0;
  std::size_t n_samples_ = 0;
  std::vector<float> data_;
  SegmentInfo info_;
};

// Square window of a segment. Valid only while the parent segment lives.
struct Tile {
  RegionView values;
  std::size_t origin_channel = 0;
  std::size_t origin_sample = 0;
  std::size_t tile_size = 0;
  std::string source;  // identifies the parent segment, used for file naming
};

struct GrayTile {
  std::vector<std::uint8_t> pixels;  // tile_size * tile_size, row-major
  std::size_t origin_channel = 0;
  std::size_t origin_sample = 0;
  std::size_t tile_size = 0;
  std::string source;
};

struct TileGrid {
  std::size_t rows = 0;  // channel blocks
  std::size_t cols = 0;  // sample blocks
  std::size_t count() const { return rows * cols; }
};

// floor((n - T) / stride + 1) per dimension; throws when T exceeds a dimension.
TileGrid tile_grid(std::size_t n_channels, std::size_t n_samples, std::size_t tile_size,
                   std::size_t stride);

// Channel blocks outer, sample blocks inner. Trailing remainders are dropped.
std::vector<Tile> tile_segment(const DasSegment& segment, std::size_t tile_size,
                               std::size_t stride, const std::string& source = {});

// Per-tile min-max mapping to [0, 255]; constant tiles map to zeros.
GrayTile tile_to_gray(const Tile& tile);
void gray_pixels(const RegionView& region, std::span<std::uint8_t> out);

}  // namespace das
