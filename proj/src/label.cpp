#include "das/label.hpp"

#include "das/error.hpp"
#include "das/metrics.hpp"
#include "das/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <limits>

namespace das {

using nlohmann::json;

void LabelCriteria::validate(double sample_rate_hz) const {
  require(split_freq_hz > 0.0 && split_freq_hz < 0.5 * sample_rate_hz,
          "split frequency must lie in (0, nyquist)");
  require(waves_ratio > 1.0, "waves ratio must exceed 1");
  require(noise_sigma_hint > 0.0 && saturation_sigma > noise_sigma_hint,
          "need saturation_sigma > noise_sigma_hint > 0");
}

LabelCriteria LabelCriteria::from_json(std::string_view text) {
  LabelCriteria c;
  try {
    const json j = json::parse(text);
    c.split_freq_hz = j.value("split_freq_hz", c.split_freq_hz);
    c.waves_ratio = j.value("waves_ratio", c.waves_ratio);
    c.saturation_sigma = j.value("saturation_sigma", c.saturation_sigma);
    c.noise_sigma_hint = j.value("noise_sigma_hint", c.noise_sigma_hint);
  } catch (const json::exception& e) {
    fail(Errc::bad_header, std::string("malformed criteria: ") + e.what());
  }
  return c;
}

std::string LabelCriteria::to_json() const {
  return json{{"split_freq_hz", split_freq_hz},
              {"waves_ratio", waves_ratio},
              {"saturation_sigma", saturation_sigma},
              {"noise_sigma_hint", noise_sigma_hint}}
      .dump();
}

std::string_view tile_class_name(TileClass c) {
  switch (c) {
    case TileClass::noise: return "noise";
    case TileClass::waves: return "waves";
    case TileClass::saturated: return "saturated";
    case TileClass::ambiguous: return "ambiguous";
  }
  return "unknown";
}

TileClass decide(const TileDiagnostics& d, const LabelCriteria& criteria) {
  if (d.sigma > criteria.saturation_sigma) return TileClass::saturated;
  if (d.max_below < d.min_above) return TileClass::noise;
  if (d.max_below >= criteria.waves_ratio * d.mean_above) return TileClass::waves;
  return TileClass::ambiguous;
}

TileDiagnostics tile_diagnostics(const RegionView& tile, const LabelCriteria& criteria,
                                 double sample_rate_hz) {
  require(tile.cols >= 2, "tile needs at least 2 samples per channel");
  TileDiagnostics d;
  d.sigma = region_sigma(tile);
  const SpectralSummary summary = average_spectral_amplitude(channel_spectra(tile, sample_rate_hz));
  double max_below = 0.0;
  double min_above = std::numeric_limits<double>::infinity();
  double sum_above = 0.0;
  std::size_t n_above = 0;
  for (std::size_t k = 0; k < summary.freqs.size(); ++k) {
    const double a = summary.avg_amplitude[k];
    if (summary.freqs[k] < criteria.split_freq_hz) {
      max_below = std::max(max_below, a);
    } else {
      min_above = std::min(min_above, a);
      sum_above += a;
      ++n_above;
    }
  }
  d.max_below = max_below;
  d.min_above = n_above > 0 ? min_above : 0.0;
  d.mean_above = n_above > 0 ? sum_above / static_cast<double>(n_above) : 0.0;
  return d;
}

TileLabel classify_tile(const RegionView& tile, const LabelCriteria& criteria,
                        double sample_rate_hz) {
  criteria.validate(sample_rate_hz);
  TileLabel label;
  label.diagnostics = tile_diagnostics(tile, criteria, sample_rate_hz);
  label.kind = decide(label.diagnostics, criteria);
  return label;
}

CorpusManifest build_training_set(const std::vector<LabeledSource>& sources,
                                  const LabelCriteria& criteria, std::size_t tile_size,
                                  const fs::path& out_root, std::size_t per_label_target,
                                  std::uint64_t seed, std::size_t n_workers) {
  require(!sources.empty(), "training set needs at least one input segment");
  require(per_label_target > 0, "per-label target must be positive");
  struct Slot {
    std::size_t source;
    std::size_t tile;
  };
  std::vector<std::vector<Tile>> tiles(sources.size());
  std::vector<Slot> slots;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    require(sources[s].segment != nullptr, "null segment in training inputs");
    criteria.validate(sources[s].segment->info().sample_rate_hz);
    tiles[s] = tile_segment(*sources[s].segment, tile_size, tile_size, sources[s].id);
    for (std::size_t t = 0; t < tiles[s].size(); ++t) slots.push_back({s, t});
  }
  // Selection order is fixed before any parallel work.
  const auto order = seeded_permutation(slots.size(), seed);

  CorpusManifest manifest;
  manifest.root = out_root;
  manifest.tile_size = tile_size;
  manifest.seed = seed;
  std::size_t n_noise = 0, n_waves = 0;
  const std::size_t chunk = std::max<std::size_t>(64, 16 * std::max<std::size_t>(1, n_workers));
  std::vector<TileClass> classes;
  for (std::size_t begin = 0; begin < order.size(); begin += chunk) {
    if (n_noise >= per_label_target && n_waves >= per_label_target) break;
    const std::size_t end = std::min(order.size(), begin + chunk);
    classes.assign(end - begin, TileClass::ambiguous);
    parallel_for(end - begin, n_workers, [&](std::size_t i) {
      const Slot& slot = slots[order[begin + i]];
      const double fs = sources[slot.source].segment->info().sample_rate_hz;
      classes[i] = classify_tile(tiles[slot.source][slot.tile].values, criteria, fs).kind;
    });
    for (std::size_t i = 0; i < classes.size(); ++i) {
      const Slot& slot = slots[order[begin + i]];
      const Tile& tile = tiles[slot.source][slot.tile];
      if (classes[i] == TileClass::noise && n_noise < per_label_target) {
        export_labeled_tile(tile_to_gray(tile), "noise", out_root, &manifest);
        ++n_noise;
      } else if (classes[i] == TileClass::waves && n_waves < per_label_target) {
        export_labeled_tile(tile_to_gray(tile), "waves", out_root, &manifest);
        ++n_waves;
      }
    }
  }
  std::string missing;
  if (n_noise < per_label_target) missing += "noise";
  if (n_waves < per_label_target) missing += missing.empty() ? "waves" : " and waves";
  if (!missing.empty()) {
    // Undo partial exports so a failed run leaves no half-built corpus.
    for (const auto& r : manifest.records) fs::remove(out_root / r.path);
    fail(Errc::shortfall, "target unreachable: insufficient " + missing + " tiles (found " +
                              std::to_string(n_noise) + " noise, " + std::to_string(n_waves) +
                              " waves, need " + std::to_string(per_label_target) + " each)");
  }
  std::sort(manifest.records.begin(), manifest.records.end(), [](const auto& a, const auto& b) {
    return std::tie(a.label, a.path) < std::tie(b.label, b.path);
  });
  manifest.save(out_root / "manifest.json");
  return manifest;
}

}  // namespace das
