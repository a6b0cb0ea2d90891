#pragma once

#include "das/segment.hpp"
#include "das/store.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace das {

// One V-shaped surface-wave arrival: a Ricker pulse whose arrival time grows
// with distance from the apex channel.
struct WaveEvent {
  long apex_channel = 0;  // index within the segment; may lie outside it
  double apex_time_s = 0.0;
  double apparent_velocity_mps = 300.0;
  double peak_frequency_hz = 15.0;
  double amplitude = 1.0;
  double decay_per_m = 0.0;
};

struct SceneConfig {
  std::size_t n_channels = 200;
  std::size_t n_samples = 30000;
  double sample_rate_hz = 500.0;
  double channel_spacing_m = 2.0;
  double noise_sigma = 60.0;
  double noise_spectral_slope = 1.0;
  double noise_corner_hz = 30.0;
  std::vector<WaveEvent> events;
  std::optional<double> saturation_clip;
  double interference_density = 0.0;  // extra random events per second of record
  std::uint64_t seed = 0;

  void validate() const;
};

std::string scene_config_to_json(const SceneConfig& config);
SceneConfig scene_config_from_json(std::string_view text);
// Accepts a single object or an array of objects.
std::vector<SceneConfig> scene_configs_from_json(std::string_view text);

enum class TruthLabel { noise, waves, interfering, saturated, ambiguous };
std::string_view truth_label_name(TruthLabel label);

// Event energy at or above this multiple of the tile's noise energy makes a
// single-event tile "waves"; below it (but above the presence floor) the tile
// is "ambiguous".
inline constexpr double kWavesSnrMargin = 2.0;
// Event energy below this multiple of noise energy counts as absent.
inline constexpr double kEventPresenceFloor = 1e-3;

struct GroundTruthMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t tile_size = 0;
  std::size_t stride = 0;
  std::vector<TruthLabel> labels;  // row-major, aligned with tile_segment order

  TruthLabel at(std::size_t r, std::size_t c) const { return labels[r * cols + c]; }
  std::size_t count(TruthLabel label) const;
  std::string to_json() const;
};

struct SegmentShape {
  std::size_t n_channels = 200;
  std::size_t n_samples = 30000;
  double sample_rate_hz = 500.0;
  double channel_spacing_m = 2.0;
};

// Noise amplitude response: ((f - corner) / (nyquist - corner))^slope above
// the corner and zero below it; slope 0 gives flat white noise. Each channel is
// scaled so its expected standard deviation is sigma.
double noise_shape(double freq_hz, double nyquist_hz, double slope, double corner_hz);
DasSegment gen_noise(const SegmentShape& shape, double sigma, double slope, std::uint64_t seed,
                     double corner_hz = 30.0);

double ricker(double t, double peak_frequency_hz);

DasSegment add_wave_event(DasSegment segment, const WaveEvent& event);

struct Scene {
  DasSegment segment;
  GroundTruthMask truth;
  std::vector<WaveEvent> events;  // configured events plus drawn interference
};

Scene gen_scene(const SceneConfig& config, std::size_t tile_size, std::size_t stride);

// Ground-truth-labelled corpus; only noise/waves tiles are exported.
CorpusManifest gen_labeled_corpus(const std::vector<SceneConfig>& configs, std::size_t tile_size,
                                  const fs::path& out_root, std::uint64_t seed,
                                  std::size_t per_label);

// Randomized desk-scale scene: noise plus a handful of V-shaped events with
// parameters drawn from seed. Used by tests, the acceptance suite and the CLI.
SceneConfig random_scene_config(std::uint64_t seed, std::size_t n_channels = 200,
                                std::size_t n_samples = 30000, std::size_t n_events = 8);

}  // namespace das
