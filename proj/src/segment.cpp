#include "das/segment.hpp"

#include "das/error.hpp"

#include <algorithm>
#include <cmath>

namespace das {

std::vector<double> RegionView::flatten() const {
  std::vector<double> out;
  out.reserve(size());
  for (std::size_t r = 0; r < rows; ++r)
    for (float v : row(r)) out.push_back(v);
  return out;
}

DasSegment::DasSegment(std::size_t n_channels, std::size_t n_samples, SegmentInfo info)
    : DasSegment(n_channels, n_samples, std::vector<float>(n_channels * n_samples, 0.0f), info) {}

DasSegment::DasSegment(std::size_t n_channels, std::size_t n_samples, std::vector<float> data,
                       SegmentInfo info)
    : n_channels_(n_channels), n_samples_(n_samples), data_(std::move(data)), info_(info) {
  require(n_channels_ >= 1 && n_samples_ >= 1, "segment needs at least one channel and sample");
  require(data_.size() == n_channels_ * n_samples_, "segment data size does not match shape");
  require(info_.sample_rate_hz > 0.0 && std::isfinite(info_.sample_rate_hz),
          "sample rate must be positive");
  require(info_.channel_spacing_m > 0.0, "channel spacing must be positive");
}

RegionView DasSegment::region(std::size_t channel0, std::size_t sample0, std::size_t rows,
                              std::size_t cols) const {
  require(channel0 + rows <= n_channels_ && sample0 + cols <= n_samples_,
          "region outside segment");
  return {data_.data() + channel0 * n_samples_ + sample0, rows, cols, n_samples_};
}

bool DasSegment::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

TileGrid tile_grid(std::size_t n_channels, std::size_t n_samples, std::size_t tile_size,
                   std::size_t stride) {
  require(tile_size > 0, "tile size must be positive");
  require(stride >= 1, "stride must be at least 1");
  if (tile_size > n_channels || tile_size > n_samples)
    fail(Errc::invalid_argument, "tile size " + std::to_string(tile_size) +
                                     " larger than segment dimension");
  return {(n_channels - tile_size) / stride + 1, (n_samples - tile_size) / stride + 1};
}

std::vector<Tile> tile_segment(const DasSegment& segment, std::size_t tile_size,
                               std::size_t stride, const std::string& source) {
  const TileGrid grid = tile_grid(segment.n_channels(), segment.n_samples(), tile_size, stride);
  std::vector<Tile> tiles;
  tiles.reserve(grid.count());
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      const std::size_t ch = r * stride;
      const std::size_t s = c * stride;
      tiles.push_back({segment.region(ch, s, tile_size, tile_size), ch, s, tile_size, source});
    }
  }
  return tiles;
}

void gray_pixels(const RegionView& region, std::span<std::uint8_t> out) {
  require(out.size() == region.size(), "pixel buffer size mismatch");
  float lo = region(0, 0);
  float hi = lo;
  for (std::size_t r = 0; r < region.rows; ++r) {
    for (float v : region.row(r)) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (!(hi > lo)) {
    std::fill(out.begin(), out.end(), std::uint8_t{0});
    return;
  }
  const double lo_d = lo;
  const double range = static_cast<double>(hi) - lo_d;
  std::size_t k = 0;
  for (std::size_t r = 0; r < region.rows; ++r) {
    for (float v : region.row(r)) {
      const double scaled = 255.0 * ((static_cast<double>(v) - lo_d) / range);
      out[k++] = static_cast<std::uint8_t>(std::lround(scaled));
    }
  }
}

GrayTile tile_to_gray(const Tile& tile) {
  GrayTile gray;
  gray.pixels.resize(tile.values.size());
  gray_pixels(tile.values, gray.pixels);
  gray.origin_channel = tile.origin_channel;
  gray.origin_sample = tile.origin_sample;
  gray.tile_size = tile.tile_size;
  gray.source = tile.source;
  return gray;
}

}  // namespace das
