#include "das/synth.hpp"

#include "das/error.hpp"
#include "das/fft.hpp"
#include "das/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>

namespace das {

using nlohmann::json;

void SceneConfig::validate() const {
  require(n_channels > 0 && n_samples > 0, "scene counts must be positive");
  require(sample_rate_hz > 0.0 && std::isfinite(sample_rate_hz), "sample rate must be positive");
  require(channel_spacing_m > 0.0, "channel spacing must be positive");
  require(noise_sigma > 0.0 && std::isfinite(noise_sigma), "noise sigma must be positive");
  require(noise_spectral_slope >= 0.0 && std::isfinite(noise_spectral_slope),
          "noise slope must be non-negative");
  require(noise_corner_hz >= 0.0 && noise_corner_hz < 0.5 * sample_rate_hz,
          "noise corner must lie in [0, nyquist)");
  require(interference_density >= 0.0 && std::isfinite(interference_density),
          "interference density must be finite and non-negative");
  if (saturation_clip) require(*saturation_clip > 0.0, "saturation clip must be positive");
}

namespace {

json event_to_json(const WaveEvent& e) {
  return {{"apex_channel", e.apex_channel},
          {"apex_time_s", e.apex_time_s},
          {"apparent_velocity_mps", e.apparent_velocity_mps},
          {"peak_frequency_hz", e.peak_frequency_hz},
          {"amplitude", e.amplitude},
          {"decay_per_m", e.decay_per_m}};
}

WaveEvent event_from_json(const json& j) {
  WaveEvent e;
  e.apex_channel = j.at("apex_channel").get<long>();
  e.apex_time_s = j.at("apex_time_s").get<double>();
  e.apparent_velocity_mps = j.at("apparent_velocity_mps").get<double>();
  e.peak_frequency_hz = j.at("peak_frequency_hz").get<double>();
  e.amplitude = j.at("amplitude").get<double>();
  e.decay_per_m = j.value("decay_per_m", 0.0);
  return e;
}

json config_to_json_value(const SceneConfig& c) {
  json events = json::array();
  for (const auto& e : c.events) events.push_back(event_to_json(e));
  json j = {{"n_channels", c.n_channels},
            {"n_samples", c.n_samples},
            {"sample_rate_hz", c.sample_rate_hz},
            {"channel_spacing_m", c.channel_spacing_m},
            {"noise_sigma", c.noise_sigma},
            {"noise_spectral_slope", c.noise_spectral_slope},
            {"noise_corner_hz", c.noise_corner_hz},
            {"events", std::move(events)},
            {"interference_density", c.interference_density},
            {"seed", c.seed}};
  j["saturation_clip"] = c.saturation_clip ? json(*c.saturation_clip) : json(nullptr);
  return j;
}

SceneConfig config_from_json_value(const json& j) {
  SceneConfig c;
  c.n_channels = j.value("n_channels", c.n_channels);
  c.n_samples = j.value("n_samples", c.n_samples);
  c.sample_rate_hz = j.value("sample_rate_hz", c.sample_rate_hz);
  c.channel_spacing_m = j.value("channel_spacing_m", c.channel_spacing_m);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.noise_spectral_slope = j.value("noise_spectral_slope", c.noise_spectral_slope);
  c.noise_corner_hz = j.value("noise_corner_hz", c.noise_corner_hz);
  c.interference_density = j.value("interference_density", c.interference_density);
  c.seed = j.value("seed", c.seed);
  if (j.contains("saturation_clip") && !j["saturation_clip"].is_null())
    c.saturation_clip = j["saturation_clip"].get<double>();
  if (j.contains("events"))
    for (const auto& e : j["events"]) c.events.push_back(event_from_json(e));
  c.validate();
  return c;
}

}  // namespace

std::string scene_config_to_json(const SceneConfig& config) {
  return config_to_json_value(config).dump(2);
}

SceneConfig scene_config_from_json(std::string_view text) {
  try {
    return config_from_json_value(json::parse(text));
  } catch (const json::exception& e) {
    fail(Errc::bad_header, std::string("malformed scene config: ") + e.what());
  }
}

std::vector<SceneConfig> scene_configs_from_json(std::string_view text) {
  try {
    const json doc = json::parse(text);
    std::vector<SceneConfig> out;
    if (doc.is_array()) {
      for (const auto& j : doc) out.push_back(config_from_json_value(j));
    } else {
      out.push_back(config_from_json_value(doc));
    }
    return out;
  } catch (const json::exception& e) {
    fail(Errc::bad_header, std::string("malformed scene config: ") + e.what());
  }
}

std::string_view truth_label_name(TruthLabel label) {
  switch (label) {
    case TruthLabel::noise: return "noise";
    case TruthLabel::waves: return "waves";
    case TruthLabel::interfering: return "interfering";
    case TruthLabel::saturated: return "saturated";
    case TruthLabel::ambiguous: return "ambiguous";
  }
  return "unknown";
}

std::size_t GroundTruthMask::count(TruthLabel label) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
}

std::string GroundTruthMask::to_json() const {
  json grid = json::array();
  for (std::size_t r = 0; r < rows; ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < cols; ++c) row.push_back(truth_label_name(at(r, c)));
    grid.push_back(std::move(row));
  }
  return json{{"rows", rows}, {"cols", cols}, {"tile_size", tile_size}, {"stride", stride},
              {"labels", std::move(grid)}}
      .dump();
}

double noise_shape(double freq_hz, double nyquist_hz, double slope, double corner_hz) {
  if (slope == 0.0) return 1.0;
  const double r = std::clamp((freq_hz - corner_hz) / (nyquist_hz - corner_hz), 0.0, 1.0);
  return std::pow(r, slope);
}

DasSegment gen_noise(const SegmentShape& shape, double sigma, double slope, std::uint64_t seed,
                     double corner_hz) {
  if (!(sigma > 0.0)) fail(Errc::invalid_argument, "noise sigma must be positive");
  require(slope >= 0.0, "noise slope must be non-negative");
  const double nyquist = 0.5 * shape.sample_rate_hz;
  require(corner_hz >= 0.0 && corner_hz < nyquist, "noise corner must lie in [0, nyquist)");
  SegmentInfo info;
  info.sample_rate_hz = shape.sample_rate_hz;
  info.channel_spacing_m = shape.channel_spacing_m;
  DasSegment seg(shape.n_channels, shape.n_samples, info);
  const std::size_t n = shape.n_samples;

  std::vector<double> gain(n / 2 + 1);
  double power = 0.0;  // mean of |H|^2 over the two-sided spectrum
  for (std::size_t k = 0; k < gain.size(); ++k) {
    const double f = static_cast<double>(k) * shape.sample_rate_hz / static_cast<double>(n);
    gain[k] = noise_shape(f, nyquist, slope, corner_hz);
    const bool unpaired = (k == 0) || (n % 2 == 0 && k == n / 2);
    power += (unpaired ? 1.0 : 2.0) * gain[k] * gain[k];
  }
  power /= static_cast<double>(n);
  require(power > 0.0, "noise shaping removes all energy");
  const double scale = sigma / std::sqrt(power);

  std::vector<double> white(n);
  for (std::size_t c = 0; c < shape.n_channels; ++c) {
    Rng rng(mix_seed(seed, c));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& v : white) v = normal(rng);
    auto out = seg.channel(c);
    if (slope == 0.0) {
      for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(sigma * white[i]);
      continue;
    }
    auto spec = fft::rfft(white);
    for (std::size_t k = 0; k < spec.size(); ++k) spec[k] *= gain[k] * scale;
    const auto shaped = fft::irfft(spec, n);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(shaped[i]);
  }
  return seg;
}

double ricker(double t, double peak_frequency_hz) {
  const double a = std::numbers::pi * std::numbers::pi * peak_frequency_hz * peak_frequency_hz * t * t;
  return (1.0 - 2.0 * a) * std::exp(-a);
}

DasSegment add_wave_event(DasSegment segment, const WaveEvent& event) {
  const double fs = segment.info().sample_rate_hz;
  if (!(event.peak_frequency_hz > 0.0) || event.peak_frequency_hz >= 0.5 * fs)
    fail(Errc::invalid_argument, "event peak frequency must lie in (0, nyquist)");
  require(event.apparent_velocity_mps > 0.0, "apparent velocity must be positive");
  require(event.amplitude >= 0.0, "event amplitude must be non-negative");
  require(event.decay_per_m >= 0.0, "decay must be non-negative");
  const double duration = static_cast<double>(segment.n_samples()) / fs;
  require(event.apex_time_s >= 0.0 && event.apex_time_s <= duration,
          "event apex outside segment time range");
  if (event.amplitude == 0.0) return segment;

  const double spacing = segment.info().channel_spacing_m;
  const double half_width = 2.5 / event.peak_frequency_hz;  // Ricker envelope < 1e-26 beyond
  const auto last = static_cast<double>(segment.n_samples() - 1);
  for (std::size_t c = 0; c < segment.n_channels(); ++c) {
    const double d = std::abs(static_cast<double>(static_cast<long>(c) - event.apex_channel)) * spacing;
    const double arrival = event.apex_time_s + d / event.apparent_velocity_mps;
    const double amp = event.amplitude * std::exp(-event.decay_per_m * d);
    const double first = std::max(0.0, std::ceil((arrival - half_width) * fs));
    const double final = std::min(last, std::floor((arrival + half_width) * fs));
    if (first > final) continue;
    auto row = segment.channel(c);
    for (auto i = static_cast<std::size_t>(first); i <= static_cast<std::size_t>(final); ++i) {
      const double t = static_cast<double>(i) / fs - arrival;
      row[i] += static_cast<float>(amp * ricker(t, event.peak_frequency_hz));
    }
  }
  return segment;
}

namespace {

// Summed-area table for per-tile sums of a non-negative field.
class TileSums {
public:
  TileSums(std::size_t rows, std::size_t cols) : cols_(cols + 1), table_((rows + 1) * (cols + 1), 0.0) {}

  template <typename F>
  void build(std::size_t rows, std::size_t cols, F&& value) {
    for (std::size_t r = 0; r < rows; ++r) {
      double run = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        run += value(r, c);
        table_[(r + 1) * cols_ + c + 1] = table_[r * cols_ + c + 1] + run;
      }
    }
  }

  double sum(std::size_t r0, std::size_t c0, std::size_t size) const {
    const std::size_t r1 = r0 + size, c1 = c0 + size;
    return table_[r1 * cols_ + c1] - table_[r0 * cols_ + c1] - table_[r1 * cols_ + c0] +
           table_[r0 * cols_ + c0];
  }

private:
  std::size_t cols_;
  std::vector<double> table_;
};

std::vector<WaveEvent> draw_interference(const SceneConfig& config) {
  std::vector<WaveEvent> out;
  if (config.interference_density <= 0.0) return out;
  Rng rng(mix_seed(config.seed, 1));
  const double duration = static_cast<double>(config.n_samples) / config.sample_rate_hz;
  std::poisson_distribution<int> count(config.interference_density * duration);
  const int n = count(rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double nyquist = 0.5 * config.sample_rate_hz;
  for (int i = 0; i < n; ++i) {
    WaveEvent e;
    e.apex_channel = static_cast<long>(unit(rng) * static_cast<double>(config.n_channels));
    e.apex_time_s = unit(rng) * duration;
    e.apparent_velocity_mps = 150.0 + 650.0 * unit(rng);
    e.peak_frequency_hz = std::min(5.0 + 30.0 * unit(rng), 0.45 * nyquist);
    e.amplitude = config.noise_sigma * (2.0 + 8.0 * unit(rng));
    e.decay_per_m = 0.003;
    out.push_back(e);
  }
  return out;
}

}  // namespace

Scene gen_scene(const SceneConfig& config, std::size_t tile_size, std::size_t stride) {
  config.validate();
  const TileGrid grid = tile_grid(config.n_channels, config.n_samples, tile_size, stride);
  const SegmentShape shape{config.n_channels, config.n_samples, config.sample_rate_hz,
                           config.channel_spacing_m};
  Scene scene;
  scene.segment = gen_noise(shape, config.noise_sigma, config.noise_spectral_slope,
                            mix_seed(config.seed, 0), config.noise_corner_hz);
  scene.events = config.events;
  for (const auto& e : draw_interference(config)) scene.events.push_back(e);

  const std::size_t rows = config.n_channels, cols = config.n_samples;
  const auto tile_origin = [&](std::size_t t) {
    return std::pair{(t / grid.cols) * stride, (t % grid.cols) * stride};
  };

  std::vector<double> noise_energy(grid.count());
  {
    TileSums sums(rows, cols);
    sums.build(rows, cols, [&](std::size_t r, std::size_t c) {
      const double v = scene.segment.at(r, c);
      return v * v;
    });
    for (std::size_t t = 0; t < grid.count(); ++t) {
      const auto [r0, c0] = tile_origin(t);
      noise_energy[t] = sums.sum(r0, c0, tile_size);
    }
  }

  // Per-tile energy of each clean event field.
  std::vector<std::vector<double>> event_energy(scene.events.size(), std::vector<double>(grid.count()));
  DasSegment total = scene.segment;
  DasSegment blank(rows, cols, scene.segment.info());
  for (std::size_t e = 0; e < scene.events.size(); ++e) {
    const DasSegment field = add_wave_event(blank, scene.events[e]);
    TileSums sums(rows, cols);
    sums.build(rows, cols, [&](std::size_t r, std::size_t c) {
      const double v = field.at(r, c);
      return v * v;
    });
    for (std::size_t t = 0; t < grid.count(); ++t) {
      const auto [r0, c0] = tile_origin(t);
      event_energy[e][t] = sums.sum(r0, c0, tile_size);
    }
    auto dst = total.values();
    const auto src = field.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  std::vector<double> clipped(grid.count(), 0.0);
  if (config.saturation_clip) {
    const auto clip = static_cast<float>(*config.saturation_clip);
    TileSums sums(rows, cols);
    sums.build(rows, cols, [&](std::size_t r, std::size_t c) {
      return std::abs(total.at(r, c)) > clip ? 1.0 : 0.0;
    });
    for (std::size_t t = 0; t < grid.count(); ++t) {
      const auto [r0, c0] = tile_origin(t);
      clipped[t] = sums.sum(r0, c0, tile_size);
    }
    for (float& v : total.values()) v = std::clamp(v, -clip, clip);
  }

  scene.truth.rows = grid.rows;
  scene.truth.cols = grid.cols;
  scene.truth.tile_size = tile_size;
  scene.truth.stride = stride;
  scene.truth.labels.resize(grid.count());
  for (std::size_t t = 0; t < grid.count(); ++t) {
    TruthLabel label = TruthLabel::noise;
    if (clipped[t] > 0.5) {
      label = TruthLabel::saturated;
    } else {
      const double floor = kEventPresenceFloor * noise_energy[t];
      std::size_t present = 0;
      double strongest = 0.0;
      for (const auto& energy : event_energy) {
        if (energy[t] > floor && energy[t] > 0.0) {
          ++present;
          strongest = std::max(strongest, energy[t]);
        }
      }
      if (present >= 2) {
        label = TruthLabel::interfering;
      } else if (present == 1) {
        label = strongest >= kWavesSnrMargin * noise_energy[t] ? TruthLabel::waves
                                                              : TruthLabel::ambiguous;
      }
    }
    scene.truth.labels[t] = label;
  }
  scene.segment = std::move(total);
  return scene;
}

CorpusManifest gen_labeled_corpus(const std::vector<SceneConfig>& configs, std::size_t tile_size,
                                  const fs::path& out_root, std::uint64_t seed,
                                  std::size_t per_label) {
  require(!configs.empty(), "corpus needs at least one scene config");
  require(per_label > 0, "per-label target must be positive");
  struct Candidate {
    std::size_t scene;
    std::size_t tile;
  };
  std::vector<Candidate> noise, waves;
  for (std::size_t s = 0; s < configs.size(); ++s) {
    const Scene scene = gen_scene(configs[s], tile_size, tile_size);
    for (std::size_t t = 0; t < scene.truth.labels.size(); ++t) {
      if (scene.truth.labels[t] == TruthLabel::noise) noise.push_back({s, t});
      if (scene.truth.labels[t] == TruthLabel::waves) waves.push_back({s, t});
    }
  }
  std::string missing;
  if (waves.size() < per_label) missing += "waves";
  if (noise.size() < per_label) missing += missing.empty() ? "noise" : " and noise";
  if (!missing.empty())
    fail(Errc::shortfall, "insufficient " + missing + " tiles: have " + std::to_string(waves.size()) +
                              " waves, " + std::to_string(noise.size()) + " noise, need " +
                              std::to_string(per_label) + " each");

  // scene -> (tile -> label)
  std::map<std::size_t, std::map<std::size_t, CorpusLabel>> selected;
  const auto pick = [&](const std::vector<Candidate>& pool, CorpusLabel label, std::uint64_t stream) {
    const auto order = seeded_permutation(pool.size(), mix_seed(seed, stream));
    for (std::size_t i = 0; i < per_label; ++i) {
      const Candidate& c = pool[order[i]];
      selected[c.scene][c.tile] = label;
    }
  };
  pick(noise, CorpusLabel::noise, 0);
  pick(waves, CorpusLabel::waves, 1);

  CorpusManifest manifest;
  manifest.root = out_root;
  manifest.tile_size = tile_size;
  manifest.seed = seed;
  for (const auto& [s, tiles] : selected) {
    const Scene scene = gen_scene(configs[s], tile_size, tile_size);
    const std::string source = "scene" + std::to_string(s) + ":seed" + std::to_string(configs[s].seed);
    const auto all = tile_segment(scene.segment, tile_size, tile_size, source);
    for (const auto& [t, label] : tiles)
      export_labeled_tile(tile_to_gray(all[t]), label_name(label), out_root, &manifest);
  }
  std::sort(manifest.records.begin(), manifest.records.end(), [](const auto& a, const auto& b) {
    return std::tie(a.label, a.path) < std::tie(b.label, b.path);
  });
  manifest.save(out_root / "manifest.json");
  return manifest;
}

SceneConfig random_scene_config(std::uint64_t seed, std::size_t n_channels, std::size_t n_samples,
                                std::size_t n_events) {
  SceneConfig c;
  c.n_channels = n_channels;
  c.n_samples = n_samples;
  c.seed = seed;
  Rng rng(mix_seed(seed, 7));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  c.noise_sigma = 40.0 + 60.0 * unit(rng);
  const double duration = static_cast<double>(n_samples) / c.sample_rate_hz;
  for (std::size_t i = 0; i < n_events; ++i) {
    WaveEvent e;
    const double span = 1.5 * static_cast<double>(n_channels);
    e.apex_channel = static_cast<long>(unit(rng) * span - 0.25 * static_cast<double>(n_channels));
    e.apex_time_s = std::min(duration, 0.05 * duration + 0.9 * duration * unit(rng));
    e.apparent_velocity_mps = 200.0 + 600.0 * unit(rng);
    e.peak_frequency_hz = 6.0 + 19.0 * unit(rng);
    e.amplitude = c.noise_sigma * (4.0 + 8.0 * unit(rng));
    e.decay_per_m = 0.004 * unit(rng);
    c.events.push_back(e);
  }
  return c;
}

}  // namespace das
