#include <doctest.h>

#include "das/error.hpp"
#include "das/metrics.hpp"
#include "das/synth.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace das;
using das::test::TempDir;

namespace {

double sample_std(std::span<const float> x) {
  double m = 0;
  for (float v : x) m += v;
  m /= double(x.size());
  double s = 0;
  for (float v : x) s += (v - m) * (v - m);
  return std::sqrt(s / double(x.size() - 1));
}

double tile_energy(const DasSegment& s, std::size_t r0, std::size_t c0, std::size_t t) {
  double e = 0;
  for (std::size_t r = r0; r < r0 + t; ++r)
    for (std::size_t c = c0; c < c0 + t; ++c) e += double(s.at(r, c)) * s.at(r, c);
  return e;
}

SceneConfig quiet_scene() {
  SceneConfig c;
  c.n_channels = 100;
  c.n_samples = 2000;
  c.noise_sigma = 50.0;
  c.seed = 21;
  return c;
}

}  // namespace

TEST_CASE("flat noise has the requested per-channel std") {
  const auto s = gen_noise({8, 30000, 500.0, 2.0}, 60.0, 0.0, 3, 0.0);
  for (std::size_t c = 0; c < s.n_channels(); ++c)
    CHECK(std::abs(sample_std(s.channel(c)) - 60.0) / 60.0 < 0.05);
}

TEST_CASE("blue noise puts more amplitude above 60 Hz than below 40 Hz") {
  const auto s = gen_noise({16, 30000, 500.0, 2.0}, 60.0, 1.0, 4);
  const auto avg = average_spectral_amplitude(channel_spectra(s.whole(), 500.0));
  double lo = 0, hi = 0;
  std::size_t nlo = 0, nhi = 0;
  for (std::size_t k = 0; k < avg.freqs.size(); ++k) {
    if (avg.freqs[k] < 40.0) lo += avg.avg_amplitude[k], ++nlo;
    if (avg.freqs[k] > 60.0) hi += avg.avg_amplitude[k], ++nhi;
  }
  CHECK(hi / double(nhi) > lo / double(nlo));
  for (std::size_t c = 0; c < s.n_channels(); ++c)
    CHECK(std::abs(sample_std(s.channel(c)) - 60.0) / 60.0 < 0.05);
}

TEST_CASE("noise is deterministic in its seed") {
  const SegmentShape shape{10, 500, 500.0, 2.0};
  CHECK(gen_noise(shape, 10.0, 1.0, 5) == gen_noise(shape, 10.0, 1.0, 5));
  CHECK_FALSE(gen_noise(shape, 10.0, 1.0, 5) == gen_noise(shape, 10.0, 1.0, 6));
  CHECK_THROWS_AS(gen_noise(shape, 0.0, 1.0, 5), Error);
}

TEST_CASE("noise shape") {
  CHECK(noise_shape(10.0, 250.0, 1.0, 30.0) == 0.0);
  CHECK(noise_shape(250.0, 250.0, 1.0, 30.0) == doctest::Approx(1.0));
  CHECK(noise_shape(140.0, 250.0, 1.0, 30.0) == doctest::Approx(0.5));
  CHECK(noise_shape(140.0, 250.0, 0.0, 0.0) == 1.0);
}

TEST_CASE("event moveout") {
  DasSegment blank(60, 3000, SegmentInfo{500.0, 0, 2.0, 0});
  WaveEvent e;
  e.apex_channel = 10;
  e.apex_time_s = 1.0;
  e.apparent_velocity_mps = 40.0;
  e.peak_frequency_hz = 15.0;
  e.amplitude = 7.0;
  const auto s = add_wave_event(blank, e);
  for (std::size_t c = 0; c < s.n_channels(); ++c) {
    const auto row = s.channel(c);
    const auto peak = std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
    const double k = std::abs(double(c) - 10.0);
    const double want = (1.0 + k * 2.0 / 40.0) * 500.0;
    CHECK(std::abs(double(peak) - want) <= 0.5);
  }
  CHECK(s.at(10, 500) == doctest::Approx(7.0));

  e.amplitude = 0.0;
  CHECK(add_wave_event(blank, e) == blank);

  e.amplitude = 1.0;
  e.peak_frequency_hz = 250.0;
  CHECK_THROWS_AS(add_wave_event(blank, e), Error);
}

TEST_CASE("ricker") {
  CHECK(ricker(0.0, 15.0) == 1.0);
  // Zero crossings at t = +-1/(sqrt(2) pi f).
  const double t0 = 1.0 / (std::sqrt(2.0) * std::numbers::pi * 15.0);
  CHECK(std::abs(ricker(t0, 15.0)) < 1e-12);
  CHECK(ricker(0.01, 15.0) == ricker(-0.01, 15.0));
}

TEST_CASE("scene without events is all noise") {
  const auto scene = gen_scene(quiet_scene(), 50, 50);
  CHECK(scene.truth.rows == 2);
  CHECK(scene.truth.cols == 40);
  CHECK(scene.truth.count(TruthLabel::noise) == 80);
}

TEST_CASE("isolated event marks the tiles it dominates") {
  auto cfg = quiet_scene();
  WaveEvent e;
  e.apex_channel = 50;
  e.apex_time_s = 2.0;
  e.apparent_velocity_mps = 400.0;
  e.peak_frequency_hz = 12.0;
  e.amplitude = 600.0;
  cfg.events = {e};
  const auto scene = gen_scene(cfg, 50, 50);

  // Oracle: energies of the clean event field and of the noise alone.
  const SegmentShape shape{cfg.n_channels, cfg.n_samples, cfg.sample_rate_hz, cfg.channel_spacing_m};
  const auto noise = gen_noise(shape, cfg.noise_sigma, cfg.noise_spectral_slope, mix_seed(cfg.seed, 0),
                               cfg.noise_corner_hz);
  const auto field = add_wave_event(DasSegment(cfg.n_channels, cfg.n_samples), e);
  std::size_t waves = 0;
  for (std::size_t r = 0; r < scene.truth.rows; ++r) {
    for (std::size_t c = 0; c < scene.truth.cols; ++c) {
      const double en = tile_energy(noise, r * 50, c * 50, 50);
      const double ee = tile_energy(field, r * 50, c * 50, 50);
      TruthLabel want = TruthLabel::noise;
      if (ee > kEventPresenceFloor * en) want = ee >= kWavesSnrMargin * en ? TruthLabel::waves : TruthLabel::ambiguous;
      CHECK(scene.truth.at(r, c) == want);
      if (want == TruthLabel::waves) ++waves;
    }
  }
  CHECK(waves >= 2);
  CHECK(scene.truth.count(TruthLabel::noise) > 60);
}

TEST_CASE("clipping marks apex tiles saturated") {
  auto cfg = quiet_scene();
  WaveEvent e;
  e.apex_channel = 25;
  e.apex_time_s = 1.0;
  e.amplitude = 2000.0;
  e.apparent_velocity_mps = 300.0;
  cfg.events = {e};
  cfg.saturation_clip = 1000.0;
  const auto scene = gen_scene(cfg, 50, 50);
  CHECK(scene.truth.at(0, 10) == TruthLabel::saturated);
  CHECK(scene.truth.count(TruthLabel::saturated) >= 1);
  for (float v : scene.segment.values()) CHECK_LE(std::abs(v), 1000.0f);
}

TEST_CASE("scene config json round trip") {
  auto cfg = random_scene_config(5, 100, 2000, 3);
  cfg.saturation_clip = 900.0;
  const auto back = scene_config_from_json(scene_config_to_json(cfg));
  CHECK(scene_config_to_json(back) == scene_config_to_json(cfg));
  CHECK(back.events.size() == 3);
  CHECK_THROWS_AS(scene_config_from_json("{\"n_channels\": \"many\"}"), Error);
}

TEST_CASE("labelled corpus") {
  std::vector<SceneConfig> configs;
  for (std::uint64_t s = 0; s < 3; ++s) configs.push_back(random_scene_config(100 + s, 100, 6000, 10));

  TempDir a("synth"), b("synth");
  const auto m = gen_labeled_corpus(configs, 50, a.path(), 9, 30);
  CHECK(m.counts().at("noise") == 30);
  CHECK(m.counts().at("waves") == 30);
  for (const auto& r : m.records) CHECK(fs::exists(a.path() / r.path));
  const auto m2 = gen_labeled_corpus(configs, 50, b.path(), 9, 30);
  CHECK(read_file_bytes(a / "manifest.json").size() > 0);
  CHECK(m.records == m2.records);

  auto quiet = quiet_scene();
  TempDir c("synth");
  try {
    gen_labeled_corpus({quiet}, 50, c.path(), 1, 5);
    FAIL("expected shortfall");
  } catch (const Error& err) {
    CHECK(err.code() == Errc::shortfall);
    CHECK(std::string(err.what()).find("insufficient waves tiles") != std::string::npos);
  }
}
