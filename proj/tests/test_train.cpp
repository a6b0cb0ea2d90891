#include <doctest.h>

#include "das/error.hpp"
#include "das/synth.hpp"
#include "das/train.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

using namespace das;
using das::test::TempDir;

namespace {

CorpusManifest fake_manifest(std::size_t per_label) {
  CorpusManifest m;
  m.tile_size = 50;
  for (std::size_t i = 0; i < per_label; ++i) {
    m.records.push_back({"noise/n" + std::to_string(i) + ".pgm", CorpusLabel::noise});
    m.records.push_back({"waves/w" + std::to_string(i) + ".pgm", CorpusLabel::waves});
  }
  return m;
}

ModelConfig small_config(std::size_t input) {
  ModelConfig c;
  c.depth = 8;
  c.stage_widths = {4, 8, 8};
  c.input_size = input;
  c.seed = 3;
  return c;
}

Batch<float> random_batch(std::size_t n, std::size_t size, std::uint64_t seed) {
  Batch<float> b(n, 1, size, size);
  Rng rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : b.data) v = u(rng);
  return b;
}

std::vector<int> alternating(std::size_t n, std::size_t offset = 0) {
  std::vector<int> l(n);
  for (std::size_t i = 0; i < n; ++i) l[i] = int((i + offset) % 2);
  return l;
}

// Largest per-tensor relative L2 difference over trainable parameters.
double max_tensor_rel_diff(const ResNet<float>& a, const ResNet<float>& b) {
  const auto sa = a.state();
  const auto sb = b.state();
  double worst = 0;
  for (std::size_t k = 0; k < sa.size(); ++k) {
    if (!sa[k].trainable) continue;
    double num = 0, den = 0;
    for (std::size_t i = 0; i < sa[k].size; ++i) {
      const double d = double(sa[k].value[i]) - sb[k].value[i];
      num += d * d;
      den += double(sb[k].value[i]) * sb[k].value[i];
    }
    worst = std::max(worst, std::sqrt(num / std::max(den, 1e-30)));
  }
  return worst;
}

void zero_fc(ResNet<float>& m) {
  for (auto& r : m.state())
    if (r.name.rfind("fc.", 0) == 0) std::fill(r.value, r.value + r.size, 0.0f);
}

}  // namespace

TEST_CASE("hyperparameters") {
  Hyperparams h;
  CHECK_NOTHROW(h.validate());
  h.seed = 42;
  h.epochs = 3;
  const auto back = Hyperparams::from_json(h.to_json());
  CHECK(back.seed == 42);
  CHECK(back.epochs == 3);
  CHECK(back.learning_rate == 0.001);
  h.batch_size = 0;
  CHECK_THROWS_AS(h.validate(), Error);
  CHECK_THROWS_AS(Hyperparams::from_json("[1,2"), Error);
}

TEST_CASE("stratified split") {
  const auto m = fake_manifest(10000);
  const auto s = split_train_val(m, 0.2, 7);
  std::size_t val_noise = 0, val_waves = 0, tr_noise = 0, tr_waves = 0;
  for (auto i : s.val) (m.records[i].label == CorpusLabel::noise ? val_noise : val_waves)++;
  for (auto i : s.train) (m.records[i].label == CorpusLabel::noise ? tr_noise : tr_waves)++;
  CHECK(val_noise == 2000);
  CHECK(val_waves == 2000);
  CHECK(tr_noise == 8000);
  CHECK(tr_waves == 8000);

  std::vector<std::size_t> all = s.train;
  all.insert(all.end(), s.val.begin(), s.val.end());
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> want(m.records.size());
  std::iota(want.begin(), want.end(), 0);
  CHECK(all == want);

  const auto again = split_train_val(m, 0.2, 7);
  CHECK(again.train == s.train);
  CHECK(again.val == s.val);
  CHECK(split_train_val(m, 0.2, 8).val != s.val);
  CHECK_THROWS_AS(split_train_val(fake_manifest(2), 0.01, 1), Error);
}

TEST_CASE("partition") {
  std::vector<std::size_t> idx(10);
  std::iota(idx.begin(), idx.end(), 100);

  const auto one = partition(idx, 1, 0, 5);
  auto sorted = one.indices;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == idx);

  std::vector<std::size_t> sizes, joined;
  for (std::size_t r = 0; r < 4; ++r) {
    const auto p = partition(idx, 4, r, 5);
    CHECK(p.worker_rank == r);
    sizes.push_back(p.indices.size());
    joined.insert(joined.end(), p.indices.begin(), p.indices.end());
  }
  CHECK(sizes == std::vector<std::size_t>{3, 3, 2, 2});
  std::sort(joined.begin(), joined.end());
  CHECK(joined == idx);
  CHECK_THROWS_AS(partition(idx, 4, 4, 5), Error);
}

TEST_CASE("world 1 step equals plain SGD with momentum") {
  const auto cfg = small_config(8);
  const ResNet<float> base(cfg);
  Hyperparams h;
  h.learning_rate = 0.05;
  h.momentum = 0.9;
  DataParallel dp(base, 1, h);

  ResNet<float> ref = base;
  std::vector<float> vel(ref.parameter_count(), 0.0f);
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto b = random_batch(6, 8, s);
    const auto l = alternating(6, s);
    dp.step(std::span(&b, 1), std::span(&l, 1));

    ref.zero_grad();
    const auto logits = ref.forward(b, Mode::train);
    ref.backward(softmax_cross_entropy(logits, l).grad);
    auto p = ref.flat_parameters();
    const auto g = ref.flat_gradients();
    for (std::size_t i = 0; i < p.size(); ++i) {
      vel[i] = 0.9f * vel[i] + g[i];
      p[i] -= 0.05f * vel[i];
    }
    ref.set_flat_parameters(p);
  }
  CHECK(dp.replica(0).flat_parameters() == ref.flat_parameters());
  CHECK(dp.replica(0).state_hash() == ref.state_hash());
}

TEST_CASE("gradient averaging matches one big batch with frozen batch norm") {
  auto base = ResNet<float>(small_config(8));
  base.set_batch_norm_frozen(true);
  Hyperparams h;
  h.learning_rate = 0.1;
  h.momentum = 0.9;

  std::vector<Batch<float>> parts;
  std::vector<std::vector<int>> labels;
  Batch<float> big(16, 1, 8, 8);
  std::vector<int> big_labels;
  for (std::size_t r = 0; r < 4; ++r) {
    parts.push_back(random_batch(4, 8, 40 + r));
    labels.push_back(alternating(4, r));
    std::copy(parts[r].data.begin(), parts[r].data.end(), big.data.begin() + std::ptrdiff_t(r * 4 * 64));
    big_labels.insert(big_labels.end(), labels[r].begin(), labels[r].end());
  }
  DataParallel k4(base, 4, h);
  DataParallel k1(base, 1, h);
  k4.step(parts, labels);
  k1.step(std::span(&big, 1), std::span(&big_labels, 1));
  CHECK(max_tensor_rel_diff(k4.replica(0), k1.replica(0)) < 1e-5);
  for (std::size_t r = 1; r < 4; ++r) CHECK(k4.replica(r).state_hash() == k4.replica(0).state_hash());
  // The step actually moved the parameters.
  CHECK(max_tensor_rel_diff(k1.replica(0), base) > 1e-4);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  const ResNet<float> base(small_config(8));
  Hyperparams h;
  h.learning_rate = 0.0;
  DataParallel dp(base, 2, h);
  std::vector<Batch<float>> b{random_batch(4, 8, 1), random_batch(4, 8, 2)};
  std::vector<std::vector<int>> l{alternating(4), alternating(4, 1)};
  for (int s = 0; s < 3; ++s) dp.step(b, l);
  CHECK(dp.replica(0).flat_parameters() == base.flat_parameters());
  CHECK(dp.replica(1).flat_parameters() == base.flat_parameters());
}

TEST_CASE("replica divergence is detected") {
  const ResNet<float> base(small_config(8));
  DataParallel dp(base, 2, Hyperparams{});
  CHECK_NOTHROW(dp.check_consistency());
  dp.replica(1).state()[0].value[0] += 1.0f;
  try {
    dp.check_consistency();
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::replica_divergence);
  }
}

TEST_CASE("evaluation baselines") {
  ImageDataset data;
  data.tile_size = 8;
  Rng rng(4);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (std::size_t i = 0; i < 100; ++i) {
    for (int k = 0; k < 64; ++k) data.pixels.push_back(u(rng));
    data.labels.push_back(int(i % 2));
  }
  ResNet<float> m(small_config(8));
  zero_fc(m);
  const auto r = evaluate(m, data, 2);
  CHECK(r.samples == 100);
  CHECK(r.accuracy == 0.5);
  CHECK(r.loss == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  // A model pinned to class 1 is perfect on an all-waves set.
  for (auto& ref : m.state())
    if (ref.name == "fc.bias") ref.value[1] = 5.0f;
  std::fill(data.labels.begin(), data.labels.end(), 1);
  CHECK(evaluate(m, data).accuracy == 1.0);

  CHECK_THROWS_AS(evaluate(m, ImageDataset{8, {}, {}}), Error);
}

TEST_CASE("training run is deterministic and checkpoints") {
  std::vector<SceneConfig> scenes;
  for (std::uint64_t s = 0; s < 2; ++s) scenes.push_back(random_scene_config(500 + s, 64, 4000, 12));
  TempDir dir("train");
  const auto manifest = gen_labeled_corpus(scenes, 16, dir / "corpus", 1, 40);
  const auto data = load_image_dataset(manifest, 2);
  CHECK(data.size() == 80);
  CHECK(data.tile_size == 16);
  CHECK(*std::max_element(data.pixels.begin(), data.pixels.end()) <= 1.0f);

  Hyperparams h;
  h.epochs = 2;
  h.batch_size = 8;
  h.learning_rate = 0.01;
  h.seed = 9;
  TrainReport r1, r2, r3;
  TrainOptions opt;
  opt.checkpoint_path = dir / "m.ckpt";
  int callbacks = 0;
  opt.on_epoch = [&](const EpochMetrics&) { ++callbacks; };
  const auto m1 = train(manifest, small_config(16), h, 1, &r1, opt);
  const auto m2 = train(manifest, small_config(16), h, 1, &r2);
  CHECK(m1.state_hash() == m2.state_hash());
  CHECK(callbacks == 2);
  CHECK(r1.epochs.size() == 2);
  CHECK(r1.n_train == 64);
  CHECK(r1.n_val == 16);
  CHECK(r1.epochs_csv().rfind("epoch,train_loss,train_acc,val_acc\n", 0) == 0);
  for (const auto& e : r1.epochs) CHECK(std::isfinite(e.train_loss));

  const auto loaded = load_checkpoint(dir / "m.ckpt", small_config(16));
  CHECK(loaded.model.state_hash() == m1.state_hash());
  CHECK(loaded.meta.epoch == 2);
  CHECK(loaded.meta.history.size() == 2);

  const auto m3 = train(manifest, small_config(16), h, 2, &r3);
  CHECK(r3.world_size == 2);
  const auto m4 = train(manifest, small_config(16), h, 2, nullptr);
  CHECK(m3.state_hash() == m4.state_hash());

  try {
    train(manifest, small_config(8), h, 1, nullptr);
    FAIL("expected shape mismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::shape_mismatch);
  }
}

TEST_CASE("throughput table") {
  const std::vector<std::size_t> worlds{1, 2};
  const auto rows = throughput_benchmark(small_config(8), worlds, 2, 4, 1);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].fraction_of_ideal == 1.0);
  CHECK(rows[0].samples_per_second > 0.0);
  CHECK(rows[1].world_size == 2);
}
