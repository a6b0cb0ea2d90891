#pragma once

#include "das/segment.hpp"
#include "das/store.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace das {

struct LabelCriteria {
  double split_freq_hz = 40.0;
  double waves_ratio = 2.0;
  double saturation_sigma = 1000.0;
  double noise_sigma_hint = 200.0;

  void validate(double sample_rate_hz) const;
  static LabelCriteria from_json(std::string_view text);
  std::string to_json() const;
};

enum class TileClass { noise, waves, saturated, ambiguous };
std::string_view tile_class_name(TileClass c);

struct TileDiagnostics {
  double sigma = 0.0;
  double max_below = 0.0;   // max average amplitude over bins with f < split
  double min_above = 0.0;   // min average amplitude over bins with f >= split
  double mean_above = 0.0;  // mean average amplitude over bins in [split, nyquist]
};

struct TileLabel {
  TileClass kind = TileClass::ambiguous;
  TileDiagnostics diagnostics;
};

// Rule precedence: saturated, noise, waves, ambiguous.
TileClass decide(const TileDiagnostics& d, const LabelCriteria& criteria);
TileDiagnostics tile_diagnostics(const RegionView& tile, const LabelCriteria& criteria,
                                 double sample_rate_hz);
TileLabel classify_tile(const RegionView& tile, const LabelCriteria& criteria,
                        double sample_rate_hz);

struct LabeledSource {
  const DasSegment* segment = nullptr;
  std::string id;  // used for collision-free tile names
};

// Seeded random walk over all non-overlapping tiles of the inputs; saturated
// and ambiguous tiles are discarded, and the first per_label_target tiles of
// each retained class are exported.
CorpusManifest build_training_set(const std::vector<LabeledSource>& sources,
                                  const LabelCriteria& criteria, std::size_t tile_size,
                                  const fs::path& out_root, std::size_t per_label_target,
                                  std::uint64_t seed, std::size_t n_workers = 1);

}  // namespace das
