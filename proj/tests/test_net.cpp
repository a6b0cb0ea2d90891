#include <doctest.h>

#include "das/checkpoint.hpp"
#include "das/error.hpp"
#include "das/resnet.hpp"
#include "das/util.hpp"
#include "layer_table.hpp"

#include <cmath>
#include <filesystem>
#include <random>

using namespace das;

namespace {

// Closed form: conv c_out*c_in*k^2, batch norm 2*c_out, fc 64*classes + classes.
std::size_t closed_form_params(int depth, std::size_t classes) {
  const std::size_t n = static_cast<std::size_t>((depth - 2) / 6);
  const std::size_t w[3] = {16, 32, 64};
  std::size_t total = 16 * 1 * 9 + 2 * 16;
  std::size_t in = 16;
  for (int s = 0; s < 3; ++s) {
    for (std::size_t b = 0; b < n; ++b) {
      total += w[s] * in * 9 + 2 * w[s] + w[s] * w[s] * 9 + 2 * w[s];
      if (in != w[s]) total += w[s] * in + 2 * w[s];
      in = w[s];
    }
  }
  return total + 64 * classes + classes;
}

template <typename T>
Batch<T> random_batch(std::size_t n, std::size_t size, std::uint64_t seed) {
  Batch<T> b(n, 1, size, size);
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : b.data) v = static_cast<T>(u(rng));
  return b;
}

template <typename T>
void zero_fc(ResNet<T>& m) {
  for (auto& r : m.state())
    if (r.name.rfind("fc.", 0) == 0) std::fill(r.value, r.value + r.size, T(0));
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.depth = 8;
  c.stage_widths = {2, 4, 8};
  c.input_size = 8;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("depth-8 summary reproduces the layer table row for row") {
  ModelConfig c;
  c.input_size = 200;
  const ResNet<float> m(c);
  const auto rows = m.summary();
  REQUIRE(rows.size() == das::test::kLayerTable.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CAPTURE(i);
    CHECK(rows[i].type == das::test::kLayerTable[i].type);
    CHECK(rows[i].output_shape == das::test::kLayerTable[i].shape);
    CHECK(rows[i].params == das::test::kLayerTable[i].params);
    total += rows[i].params;
  }
  CHECK(total == 77234);
  CHECK(m.parameter_count() == 77234);
}

TEST_CASE("parameter counts follow the closed form for every depth") {
  for (int depth : {8, 14, 20}) {
    ModelConfig c;
    c.depth = depth;
    c.input_size = 50;
    CAPTURE(depth);
    CHECK(ResNet<float>(c).parameter_count() == closed_form_params(depth, 2));
  }
}

TEST_CASE("unsupported depth is rejected") {
  ModelConfig c;
  c.depth = 10;
  CHECK_THROWS_AS(ResNet<float>{c}, Error);
}

TEST_CASE("stride-2 stages use the ceil rule: 50 -> 25 -> 13") {
  ModelConfig c;
  c.input_size = 50;
  const auto rows = ResNet<float>(c).summary();
  CHECK(rows[9].output_shape == std::vector<long>{-1, 16, 50, 50});
  CHECK(rows[18].output_shape == std::vector<long>{-1, 32, 25, 25});
  CHECK(rows[27].output_shape == std::vector<long>{-1, 64, 13, 13});
  ResNet<float> m(c);
  CHECK(m.forward(random_batch<float>(2, 50, 1), Mode::train).rows() == 2);
}

TEST_CASE("batch norm starts at scale 1, shift 0, running stats (0, 1)") {
  const ResNet<float> m(tiny_config());
  for (const auto& r : m.state()) {
    const auto ends = [&](std::string_view s) { return r.name.size() >= s.size() && r.name.ends_with(s); };
    if (ends("bn.weight") || ends("bn1.weight") || ends("bn2.weight") || ends("running_var"))
      for (std::size_t i = 0; i < r.size; ++i) CHECK(r.value[i] == 1.0f);
    if (ends("bn.bias") || ends("bn1.bias") || ends("bn2.bias") || ends("running_mean") || r.name == "fc.bias")
      for (std::size_t i = 0; i < r.size; ++i) CHECK(r.value[i] == 0.0f);
  }
}

TEST_CASE("same seed builds the same network") {
  CHECK(ResNet<float>(tiny_config()).state_hash() == ResNet<float>(tiny_config()).state_hash());
  auto other = tiny_config();
  other.seed = 12;
  CHECK(ResNet<float>(tiny_config()).state_hash() != ResNet<float>(other).state_hash());
}

TEST_CASE("batch [150, 1, 200, 200] gives logits [150, 2]") {
  ModelConfig c;
  c.input_size = 200;
  const ResNet<float> m(c);
  const auto logits = m.predict(random_batch<float>(150, 200, 3));
  CHECK(logits.rows() == 150);
  CHECK(logits.cols() == 2);
}

TEST_CASE("eval mode is pure") {
  ResNet<float> m(tiny_config());
  const auto x = random_batch<float>(5, 8, 4);
  m.forward(x, Mode::train);  // moves running stats away from (0, 1)
  const auto a = m.forward(x, Mode::eval);
  const auto hash = m.state_hash();
  const auto b = m.predict(x);
  CHECK(a == b);
  CHECK(m.state_hash() == hash);
}

TEST_CASE("eval chunking does not change results") {
  ModelConfig c = tiny_config();
  const ResNet<float> m(c);
  const auto x = random_batch<float>(40, 8, 5);
  const auto all = m.predict(x);
  for (std::size_t i = 0; i < 40; i += 7) {
    Batch<float> one(1, 1, 8, 8);
    std::copy(x.sample(i).begin(), x.sample(i).end(), one.data.begin());
    const auto row = m.predict(one);
    CHECK(std::abs(row(0, 0) - all(static_cast<Eigen::Index>(i), 0)) < 1e-5f);
  }
}

TEST_CASE("zero fully connected layer gives probability 0.5") {
  ResNet<float> m(tiny_config());
  zero_fc(m);
  const auto x = random_batch<float>(6, 8, 6);
  const auto logits = m.predict(x);
  CHECK(logits.cwiseAbs().maxCoeff() == 0.0f);
  for (double p : predict_proba(m, x)) CHECK(p == 0.5);
}

TEST_CASE("probabilities are non-negative and sum to one") {
  const ResNet<float> m(tiny_config());
  const auto p = softmax(m.predict(random_batch<float>(9, 8, 7)));
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    CHECK(p.row(r).minCoeff() >= 0.0f);
    CHECK(std::abs(p.row(r).sum() - 1.0f) < 1e-6f);
  }
}

TEST_CASE("shape mismatch is reported") {
  ResNet<float> m(tiny_config());
  try {
    m.forward(random_batch<float>(2, 9, 1), Mode::train);
    FAIL("expected shape_mismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::shape_mismatch);
  }
}

TEST_CASE("softmax cross-entropy") {
  Logits<double> l(1, 2);
  l << 0.0, 0.0;
  const int zero = 0;
  CHECK(softmax_cross_entropy(l, std::span(&zero, 1)).loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  l << 30.0, -30.0;
  const auto r = softmax_cross_entropy(l, std::span(&zero, 1));
  CHECK(std::isfinite(r.loss));
  CHECK(r.loss < 1e-20);
  l << 1000.0, -1000.0;
  CHECK(std::isfinite(softmax_cross_entropy(l, std::span(&zero, 1)).loss));
  const int bad = 2;
  CHECK_THROWS_AS(softmax_cross_entropy(l, std::span(&bad, 1)), Error);
}

TEST_CASE("cross-entropy gradient matches central differences") {
  Rng rng(21);
  std::normal_distribution<double> g(0.0, 2.0);
  Logits<double> l(4, 2);
  for (Eigen::Index i = 0; i < l.size(); ++i) l.data()[i] = g(rng);
  const std::vector<int> labels = {0, 1, 1, 0};
  const auto r = softmax_cross_entropy(l, labels);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < l.size(); ++i) {
    Logits<double> p = l, q = l;
    p.data()[i] += h;
    q.data()[i] -= h;
    const double fd = (softmax_cross_entropy(p, labels).loss - softmax_cross_entropy(q, labels).loss) / (2 * h);
    const double a = r.grad.data()[i];
    CHECK(std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8}) < 1e-4);
  }
}

TEST_CASE("argmax breaks ties toward the lower index") {
  Logits<float> l(2, 2);
  l << 0.5f, 0.5f, 0.1f, 0.2f;
  CHECK(argmax_rows(l) == std::vector<int>{0, 1});
}

TEST_CASE("every parameter gradient of the tiny model matches central differences") {
  ResNet<double> m(tiny_config());
  const auto x = random_batch<double>(4, 8, 8);
  const std::vector<int> labels = {0, 1, 1, 0};
  const auto loss_at = [&]() { return softmax_cross_entropy(m.forward(x, Mode::train), labels).loss; };
  m.zero_grad();
  m.backward(softmax_cross_entropy(m.forward(x, Mode::train), labels).grad);
  const auto analytic = m.flat_gradients();
  auto params = m.flat_parameters();
  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    m.set_flat_parameters(params);
    const double up = loss_at();
    params[i] = saved - h;
    m.set_flat_parameters(params);
    const double down = loss_at();
    params[i] = saved;
    const double fd = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max({std::abs(analytic[i]), std::abs(fd), 1e-6}));
  }
  m.set_flat_parameters(params);
  CHECK(worst < 1e-3);
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
  ResNet<double> m(tiny_config());
  const auto logits = m.forward(random_batch<double>(3, 8, 9), Mode::train);
  m.zero_grad();
  m.backward(Logits<double>::Zero(logits.rows(), logits.cols()));
  for (double g : m.flat_gradients()) CHECK(g == 0.0);
}

TEST_CASE("a duplicated sample contributes exactly like the single sample") {
  ResNet<double> m(tiny_config());
  const auto one = random_batch<double>(1, 8, 10);
  Batch<double> two(2, 1, 8, 8);
  std::copy(one.data.begin(), one.data.end(), two.data.begin());
  std::copy(one.data.begin(), one.data.end(), two.data.begin() + 64);
  const std::vector<int> l1 = {1}, l2 = {1, 1};
  m.set_batch_norm_frozen(true);
  m.zero_grad();
  const auto logits2 = m.forward(two, Mode::train);
  const auto r2 = softmax_cross_entropy(logits2, l2);
  CHECK((r2.grad.row(0) - r2.grad.row(1)).cwiseAbs().maxCoeff() < 1e-12);
  m.backward(r2.grad);
  const auto g2 = m.flat_gradients();
  m.zero_grad();
  m.backward(softmax_cross_entropy(m.forward(one, Mode::train), l1).grad);
  const auto g1 = m.flat_gradients();
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g2[i] == doctest::Approx(g1[i]).epsilon(1e-9).scale(1e-12));
}

TEST_CASE("backward without a cached forward fails") {
  ResNet<float> m(tiny_config());
  try {
    m.backward(Logits<float>::Zero(1, 2));
    FAIL("expected no_forward_state");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::no_forward_state);
  }
}

TEST_CASE("checkpoint round trip is bit exact and sized by the format") {
  const auto dir = std::filesystem::temp_directory_path() / "das_test_net";
  std::filesystem::create_directories(dir);
  ModelConfig c = tiny_config();
  ResNet<float> m(c);
  const auto x = random_batch<float>(6, 8, 12);
  m.forward(x, Mode::train);  // non-trivial running statistics
  const auto path = dir / "m.ckpt";
  save_checkpoint(m, path, {3, {{1, 0.7, 0.5, 0.6}}});
  auto loaded = load_checkpoint(path);
  CHECK(loaded.model.predict(x) == m.predict(x));
  CHECK(loaded.model.state_hash() == m.state_hash());
  CHECK(loaded.meta.epoch == 3);
  REQUIRE(loaded.meta.history.size() == 1);
  CHECK(loaded.meta.history[0].val_accuracy == 0.6);

  const std::size_t header = checkpoint_header_json(m, {3, {{1, 0.7, 0.5, 0.6}}}).size();
  std::size_t bn = 0;
  for (const auto& r : m.state())
    if (r.name.ends_with("running_mean")) bn += r.size;
  CHECK(std::filesystem::file_size(path) == 16 + header + 4 * (m.parameter_count() + 2 * bn));

  ModelConfig other = c;
  other.num_classes = 3;
  try {
    load_checkpoint(path, other);
    FAIL("expected config_mismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::config_mismatch);
  }
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 4);
  CHECK_THROWS_AS(load_checkpoint(path), Error);
  std::filesystem::remove_all(dir);
}
