#include <doctest.h>

#include "das/error.hpp"
#include "das/label.hpp"
#include "das/metrics.hpp"
#include "das/synth.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace das;
using das::test::TempDir;

namespace {

DasSegment ricker_tile(double noise_sigma, std::uint64_t seed) {
  auto s = gen_noise({200, 200, 500.0, 2.0}, noise_sigma, 1.0, seed);
  WaveEvent e;
  e.apex_channel = 100;
  e.apex_time_s = 0.1;
  e.apparent_velocity_mps = 2000.0;
  e.peak_frequency_hz = 15.0;
  e.amplitude = 500.0;
  return add_wave_event(std::move(s), e);
}

}  // namespace

TEST_CASE("criteria validation and json") {
  LabelCriteria c;
  CHECK_NOTHROW(c.validate(500.0));
  CHECK_THROWS_AS(c.validate(60.0), Error);  // split above nyquist
  LabelCriteria bad = c;
  bad.waves_ratio = 1.0;
  CHECK_THROWS_AS(bad.validate(500.0), Error);
  bad = c;
  bad.saturation_sigma = 100.0;
  CHECK_THROWS_AS(bad.validate(500.0), Error);
  const auto back = LabelCriteria::from_json(c.to_json());
  CHECK(back.split_freq_hz == 40.0);
  CHECK(back.waves_ratio == 2.0);
  CHECK(LabelCriteria::from_json("{\"waves_ratio\": 3}").waves_ratio == 3.0);
}

TEST_CASE("large sigma is saturated") {
  const auto s = gen_noise({200, 200, 500.0, 2.0}, 1500.0, 0.0, 1, 0.0);
  const auto l = classify_tile(s.whole(), LabelCriteria{}, 500.0);
  CHECK(l.kind == TileClass::saturated);
  CHECK(l.diagnostics.sigma > 1000.0);
}

TEST_CASE("blue noise is noise") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = gen_noise({200, 200, 500.0, 2.0}, 60.0, 1.0, seed);
    CHECK(classify_tile(s.whole(), LabelCriteria{}, 500.0).kind == TileClass::noise);
  }
  // Synthetic monotone spectrum straight through the decision rule.
  TileDiagnostics d{10.0, 4.0, 5.0, 9.0};
  CHECK(decide(d, LabelCriteria{}) == TileClass::noise);
}

TEST_CASE("ricker event over weak noise is waves") {
  const auto s = ricker_tile(20.0, 3);
  const LabelCriteria crit;
  const auto l = classify_tile(s.whole(), crit, 500.0);
  CHECK(l.kind == TileClass::waves);

  // Oracle: recompute rule (3) from the spectral summary.
  const auto avg = average_spectral_amplitude(channel_spectra(s.whole(), 500.0));
  double max_below = 0, sum_above = 0;
  std::size_t n_above = 0;
  for (std::size_t k = 0; k < avg.freqs.size(); ++k) {
    if (avg.freqs[k] < 40.0) max_below = std::max(max_below, avg.avg_amplitude[k]);
    else sum_above += avg.avg_amplitude[k], ++n_above;
  }
  CHECK(max_below >= 2.0 * sum_above / double(n_above));
  CHECK(l.diagnostics.max_below == doctest::Approx(max_below).epsilon(1e-12));
  CHECK(l.diagnostics.mean_above == doctest::Approx(sum_above / double(n_above)).epsilon(1e-12));
}

TEST_CASE("precedence") {
  const LabelCriteria c;
  CHECK(decide({1500.0, 100.0, 1.0, 1.0}, c) == TileClass::saturated);
  CHECK(decide({10.0, 1.0, 2.0, 5.0}, c) == TileClass::noise);
  CHECK(decide({10.0, 10.0, 1.0, 5.0}, c) == TileClass::waves);
  CHECK(decide({10.0, 9.0, 1.0, 5.0}, c) == TileClass::ambiguous);
  // Boundary: "at least twice".
  CHECK(decide({10.0, 10.0, 1.0, 5.0}, c) == TileClass::waves);
}

TEST_CASE("diagnostics reproduce the decision") {
  const LabelCriteria c;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto s = seed % 2 ? ricker_tile(60.0 + 40.0 * double(seed), seed)
                            : gen_noise({100, 100, 500.0, 2.0}, 80.0, 1.0, seed);
    const auto l = classify_tile(s.whole(), c, 500.0);
    CHECK(decide(l.diagnostics, c) == l.kind);
  }
}

TEST_CASE("noise and waves decisions are scale invariant with saturation disabled") {
  LabelCriteria c;
  c.saturation_sigma = 1e30;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto s = seed % 2 ? ricker_tile(30.0 * double(seed), seed)
                            : gen_noise({50, 50, 500.0, 2.0}, 80.0, 1.0, seed);
    auto scaled = s;
    for (auto& v : scaled.values()) v *= 64.0f;  // power of two keeps the float products exact
    CHECK(classify_tile(s.whole(), c, 500.0).kind == classify_tile(scaled.whole(), c, 500.0).kind);
  }
}

TEST_CASE("noise-only scenes label as noise") {
  SceneConfig cfg;
  cfg.n_channels = 200;
  cfg.n_samples = 10000;
  cfg.seed = 77;
  const auto scene = gen_scene(cfg, 50, 50);
  const auto tiles = tile_segment(scene.segment, 50, 50);
  std::size_t noise = 0;
  for (const auto& t : tiles)
    if (classify_tile(t.values, LabelCriteria{}, 500.0).kind == TileClass::noise) ++noise;
  CHECK(double(noise) >= 0.99 * double(tiles.size()));
}

TEST_CASE("training set counts and shortfall") {
  std::vector<DasSegment> segs;
  for (std::uint64_t s = 0; s < 2; ++s)
    segs.push_back(gen_scene(random_scene_config(300 + s, 200, 10000, 20), 50, 50).segment);
  std::vector<LabeledSource> sources;
  for (std::size_t i = 0; i < segs.size(); ++i) sources.push_back({&segs[i], "seg" + std::to_string(i)});

  TempDir a("label"), b("label");
  const auto m = build_training_set(sources, LabelCriteria{}, 50, a.path(), 40, 5);
  CHECK(m.counts().at("noise") == 40);
  CHECK(m.counts().at("waves") == 40);
  const auto m2 = build_training_set(sources, LabelCriteria{}, 50, b.path(), 40, 5, 3);
  CHECK(m.records == m2.records);

  const auto loud = gen_noise({100, 200, 500.0, 2.0}, 3000.0, 1.0, 2);
  TempDir c("label");
  try {
    build_training_set({{&loud, "loud"}}, LabelCriteria{}, 50, c.path(), 1, 0);
    FAIL("expected shortfall");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::shortfall);
    const std::string what = e.what();
    CHECK(what.find("noise") != std::string::npos);
    CHECK(what.find("waves") != std::string::npos);
  }
}
