#include "das/resnet.hpp"

#include "das/error.hpp"
#include "das/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

namespace das {

using nlohmann::json;

void ModelConfig::validate() const {
  if (depth != 8 && depth != 14 && depth != 20)
    fail(Errc::invalid_argument, "unsupported depth " + std::to_string(depth) + " (expected 8, 14 or 20)");
  for (auto w : stage_widths) require(w > 0, "stage widths must be positive");
  require(in_channels >= 1, "in_channels must be positive");
  require(num_classes >= 2, "num_classes must be at least 2");
  require(input_size >= 1, "input_size must be positive");
}

std::string ModelConfig::to_json() const {
  return json{{"depth", depth},
              {"stage_widths", stage_widths},
              {"in_channels", in_channels},
              {"num_classes", num_classes},
              {"input_size", input_size},
              {"seed", seed}}
      .dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.depth = j.value("depth", c.depth);
    if (j.contains("stage_widths")) c.stage_widths = j["stage_widths"].get<std::array<std::size_t, 3>>();
    c.in_channels = j.value("in_channels", c.in_channels);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.input_size = j.value("input_size", c.input_size);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    fail(Errc::bad_header, std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename T>
struct ResNet<T>::TrainState {
  std::size_t batch = 0;
  nn::Act<T> input;
  nn::BnCache<T> stem_bn;
  nn::Act<T> stem_out;
  std::vector<nn::BlockCache<T>> blocks;
  Buffer<T> pooled;  // batch x channels
  // Scratch reused between calls.
  nn::Act<T> h, grad, dx;
  nn::Act<T> ping[2];
  Buffer<T> cols, dcols;
};

namespace {

constexpr std::size_t kEvalChunk = 16;

template <typename T>
void init_normal(Buffer<T>& values, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  for (T& v : values) v = static_cast<T>(normal(rng));
}

}  // namespace

template <typename T>
ResNet<T>::ResNet(const ModelConfig& config) : config_(config) {
  config_.validate();
  build();
}

template <typename T>
ResNet<T>::ResNet(const ResNet& other)
    : config_(other.config_),
      stem_conv_(other.stem_conv_),
      stem_bn_(other.stem_bn_),
      blocks_(other.blocks_),
      fc_weight_(other.fc_weight_),
      fc_bias_(other.fc_bias_),
      bn_frozen_(other.bn_frozen_) {}

template <typename T>
ResNet<T>& ResNet<T>::operator=(const ResNet& other) {
  if (this != &other) {
    config_ = other.config_;
    stem_conv_ = other.stem_conv_;
    stem_bn_ = other.stem_bn_;
    blocks_ = other.blocks_;
    fc_weight_ = other.fc_weight_;
    fc_bias_ = other.fc_bias_;
    bn_frozen_ = other.bn_frozen_;
    state_.reset();
  }
  return *this;
}

template <typename T>
ResNet<T>::ResNet(ResNet&&) noexcept = default;
template <typename T>
ResNet<T>& ResNet<T>::operator=(ResNet&&) noexcept = default;
template <typename T>
ResNet<T>::~ResNet() = default;

template <typename T>
void ResNet<T>::build() {
  const auto& w = config_.stage_widths;
  std::uint64_t layer = 0;
  const auto init_conv = [&](nn::Conv2d<T>& conv) {
    const double fan_in = static_cast<double>(conv.in_channels() * conv.kernel() * conv.kernel());
    init_normal(conv.weight.value, std::sqrt(2.0 / fan_in), mix_seed(config_.seed, layer++));
  };
  stem_conv_ = nn::Conv2d<T>("stem.conv.weight", config_.in_channels, w[0], 3, 1);
  stem_bn_ = nn::BatchNorm2d<T>("stem.bn", w[0]);
  init_conv(stem_conv_);
  std::size_t in = w[0];
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t b = 0; b < config_.blocks_per_stage(); ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      const std::string name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      blocks_.emplace_back(name, in, w[s], stride);
      init_conv(blocks_.back().conv1);
      init_conv(blocks_.back().conv2);
      if (blocks_.back().has_projection()) init_conv(blocks_.back().proj);
      in = w[s];
    }
  }
  fc_weight_ = nn::Param<T>("fc.weight", {config_.num_classes, w[2]});
  fc_bias_ = nn::Param<T>("fc.bias", {config_.num_classes});
  init_normal(fc_weight_.value, 1.0 / std::sqrt(static_cast<double>(w[2])), mix_seed(config_.seed, layer++));
}

template <typename T>
Logits<T> ResNet<T>::forward(const Batch<T>& batch, Mode mode) {
  if (mode == Mode::eval) return predict(batch);
  return run(batch, true);
}

template <typename T>
Logits<T> ResNet<T>::run(const Batch<T>& batch, bool train) {
  if (batch.c != config_.in_channels || batch.h != config_.input_size ||
      batch.w != config_.input_size || batch.n == 0 ||
      batch.data.size() != batch.n * batch.c * batch.h * batch.w)
    fail(Errc::shape_mismatch, "batch shape does not match model input [B, " +
                                   std::to_string(config_.in_channels) + ", " +
                                   std::to_string(config_.input_size) + ", " +
                                   std::to_string(config_.input_size) + "]");
  const bool use_batch_stats = train && !bn_frozen_;
  // Eval keeps one block scratch and ping-pongs block outputs; the buffers are
  // per thread so concurrent predict calls never share state.
  thread_local TrainState eval_state;
  if (train && !state_) state_ = std::make_unique<TrainState>();
  TrainState& s = train ? *state_ : eval_state;
  s.batch = train ? batch.n : 0;
  s.blocks.resize(train ? blocks_.size() : 1);

  // NCHW -> CNHW
  const std::size_t hw = batch.h * batch.w;
  s.input.reshape(batch.c, batch.n, batch.h, batch.w);
  for (std::size_t b = 0; b < batch.n; ++b)
    for (std::size_t c = 0; c < batch.c; ++c)
      std::memcpy(s.input.v.data() + (c * batch.n + b) * hw,
                  batch.data.data() + (b * batch.c + c) * hw, hw * sizeof(T));

  stem_conv_.forward(s.input, s.h, s.cols);
  stem_bn_.forward(s.h, s.stem_out, use_batch_stats, train ? &s.stem_bn : nullptr);
  nn::relu_inplace(s.stem_out);
  const nn::Act<T>* x = &s.stem_out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    nn::BlockCache<T>& cache = train ? s.blocks[i] : s.blocks[0];
    nn::Act<T>& out = train ? s.blocks[i].out : s.ping[i % 2];
    blocks_[i].forward(*x, out, use_batch_stats, cache, train);
    x = &out;
  }

  const std::size_t channels = x->c;
  const std::size_t plane = x->h * x->w;
  s.pooled.assign(batch.n * channels, T(0));
  for (std::size_t c = 0; c < channels; ++c) {
    const T* src = x->channel(c);
    for (std::size_t b = 0; b < batch.n; ++b) {
      double sum = 0.0;
      for (std::size_t i = 0; i < plane; ++i) sum += src[b * plane + i];
      s.pooled[b * channels + c] = static_cast<T>(sum / static_cast<double>(plane));
    }
  }
  const Eigen::Map<const Logits<T>> pooled(s.pooled.data(), static_cast<Eigen::Index>(batch.n),
                                           static_cast<Eigen::Index>(channels));
  const Eigen::Map<const Logits<T>> weight(fc_weight_.value.data(),
                                           static_cast<Eigen::Index>(config_.num_classes),
                                           static_cast<Eigen::Index>(channels));
  Logits<T> logits = pooled * weight.transpose();
  for (Eigen::Index r = 0; r < logits.rows(); ++r)
    for (Eigen::Index k = 0; k < logits.cols(); ++k) logits(r, k) += fc_bias_.value[static_cast<std::size_t>(k)];

  if (use_batch_stats) {
    stem_bn_.update_running(s.stem_bn);
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].update_running(s.blocks[i]);
  }
  return logits;
}

template <typename T>
Logits<T> ResNet<T>::predict(const Batch<T>& batch) const {
  if (batch.n <= kEvalChunk) return const_cast<ResNet*>(this)->run(batch, false);
  Logits<T> out(static_cast<Eigen::Index>(batch.n), static_cast<Eigen::Index>(config_.num_classes));
  const std::size_t per = batch.c * batch.h * batch.w;
  for (std::size_t b0 = 0; b0 < batch.n; b0 += kEvalChunk) {
    const std::size_t nb = std::min(kEvalChunk, batch.n - b0);
    Batch<T> chunk;
    chunk.n = nb;
    chunk.c = batch.c;
    chunk.h = batch.h;
    chunk.w = batch.w;
    chunk.data.assign(batch.data.begin() + static_cast<std::ptrdiff_t>(b0 * per),
                      batch.data.begin() + static_cast<std::ptrdiff_t>((b0 + nb) * per));
    out.middleRows(static_cast<Eigen::Index>(b0), static_cast<Eigen::Index>(nb)) =
        const_cast<ResNet*>(this)->run(chunk, false);
  }
  return out;
}

template <typename T>
void ResNet<T>::backward(const Logits<T>& dlogits) {
  if (!state_ || state_->batch == 0)
    fail(Errc::no_forward_state, "backward called without a cached train-mode forward");
  TrainState& s = *state_;
  const std::size_t n = s.batch;
  if (static_cast<std::size_t>(dlogits.rows()) != n ||
      static_cast<std::size_t>(dlogits.cols()) != config_.num_classes)
    fail(Errc::shape_mismatch, "dlogits shape does not match the cached batch");

  const nn::Act<T>& last = blocks_.empty() ? s.stem_out : s.blocks.back().out;
  const std::size_t channels = last.c;
  const std::size_t plane = last.h * last.w;
  const auto rows = static_cast<Eigen::Index>(n);
  const auto cols = static_cast<Eigen::Index>(channels);
  const auto classes = static_cast<Eigen::Index>(config_.num_classes);
  const Eigen::Map<const Logits<T>> pooled(s.pooled.data(), rows, cols);
  Eigen::Map<Logits<T>> dweight(fc_weight_.grad.data(), classes, cols);
  const Eigen::Map<const Logits<T>> weight(fc_weight_.value.data(), classes, cols);
  dweight.noalias() += dlogits.transpose() * pooled;
  for (Eigen::Index k = 0; k < classes; ++k)
    fc_bias_.grad[static_cast<std::size_t>(k)] += dlogits.col(k).sum();
  const Logits<T> dpooled = dlogits * weight;

  nn::Act<T>& grad = s.grad;
  grad.reshape(channels, n, last.h, last.w);
  const T inv_plane = static_cast<T>(1.0 / static_cast<double>(plane));
  for (std::size_t c = 0; c < channels; ++c) {
    T* dst = grad.channel(c);
    for (std::size_t b = 0; b < n; ++b) {
      const T g = dpooled(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(c)) * inv_plane;
      std::fill(dst + b * plane, dst + (b + 1) * plane, g);
    }
  }

  for (std::size_t i = blocks_.size(); i-- > 0;) {
    const nn::Act<T>& x = i == 0 ? s.stem_out : s.blocks[i - 1].out;
    blocks_[i].backward(x, s.blocks[i], s.grad, s.dx);
    std::swap(s.grad, s.dx);
  }
  for (std::size_t i = 0; i < s.grad.v.size(); ++i)
    if (!(s.stem_out.v[i] > T(0))) s.grad.v[i] = T(0);
  stem_bn_.backward(s.stem_bn, s.grad, s.h);
  stem_conv_.backward(s.input, s.h, nullptr, s.cols, s.dcols);
}

template <typename T>
void ResNet<T>::zero_grad() {
  for (auto& ref : state())
    if (ref.grad) std::fill(ref.grad, ref.grad + ref.size, T(0));
}

template <typename T>
std::vector<StateRef<T>> ResNet<T>::state() {
  std::vector<StateRef<T>> out;
  const auto param = [&](nn::Param<T>& p) {
    out.push_back({p.name, p.shape, p.value.data(), p.grad.data(), p.size(), true});
  };
  const auto bn = [&](nn::BatchNorm2d<T>& layer) {
    param(layer.gamma);
    param(layer.beta);
    out.push_back({layer.name + ".running_mean", {layer.channels()}, layer.running_mean.data(),
                   nullptr, layer.channels(), false});
    out.push_back({layer.name + ".running_var", {layer.channels()}, layer.running_var.data(),
                   nullptr, layer.channels(), false});
  };
  param(stem_conv_.weight);
  bn(stem_bn_);
  for (auto& block : blocks_) {
    param(block.conv1.weight);
    bn(block.bn1);
    param(block.conv2.weight);
    bn(block.bn2);
    if (block.has_projection()) {
      param(block.proj.weight);
      bn(block.proj_bn);
    }
  }
  param(fc_weight_);
  param(fc_bias_);
  return out;
}

template <typename T>
std::vector<StateRef<const T>> ResNet<T>::state() const {
  std::vector<StateRef<const T>> out;
  for (auto& r : const_cast<ResNet*>(this)->state())
    out.push_back({r.name, r.shape, r.value, r.grad, r.size, r.trainable});
  return out;
}

template <typename T>
std::size_t ResNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& r : state())
    if (r.trainable) n += r.size;
  return n;
}

template <typename T>
std::size_t ResNet<T>::batch_norm_channels() const {
  std::size_t n = 0;
  for (const auto& r : state())
    if (!r.trainable) n += r.size;
  return n / 2;
}

template <typename T>
std::vector<T> ResNet<T>::flat_parameters() const {
  std::vector<T> out;
  for (const auto& r : state())
    if (r.trainable) out.insert(out.end(), r.value, r.value + r.size);
  return out;
}

template <typename T>
std::vector<T> ResNet<T>::flat_gradients() const {
  std::vector<T> out;
  for (const auto& r : state())
    if (r.trainable) out.insert(out.end(), r.grad, r.grad + r.size);
  return out;
}

template <typename T>
void ResNet<T>::set_flat_parameters(std::span<const T> values) {
  std::size_t offset = 0;
  auto refs = state();
  for (auto& r : refs) {
    if (!r.trainable) continue;
    require(offset + r.size <= values.size(), "flat parameter vector too short");
    std::copy(values.begin() + static_cast<std::ptrdiff_t>(offset),
              values.begin() + static_cast<std::ptrdiff_t>(offset + r.size), r.value);
    offset += r.size;
  }
  require(offset == values.size(), "flat parameter vector size mismatch");
}

template <typename T>
std::uint64_t ResNet<T>::state_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& r : state())
    h = fnv1a(std::as_bytes(std::span(r.value, r.size)), h);
  return h;
}

template <typename T>
std::vector<LayerSummary> ResNet<T>::summary() const {
  std::vector<LayerSummary> rows;
  const auto shape = [](std::size_t c, std::size_t s) {
    return std::vector<long>{-1, static_cast<long>(c), static_cast<long>(s), static_cast<long>(s)};
  };
  std::size_t size = config_.input_size;
  std::size_t channels = stem_conv_.out_channels();
  rows.push_back({"Conv2d", shape(channels, size), stem_conv_.weight.size()});
  rows.push_back({"BatchNorm2d", shape(channels, size), 2 * stem_bn_.channels()});
  rows.push_back({"ReLU", shape(channels, size), 0});
  for (const auto& block : blocks_) {
    size = block.conv1.out_size(size);
    channels = block.conv1.out_channels();
    rows.push_back({"Conv2d", shape(channels, size), block.conv1.weight.size()});
    rows.push_back({"BatchNorm2d", shape(channels, size), 2 * block.bn1.channels()});
    rows.push_back({"ReLU", shape(channels, size), 0});
    rows.push_back({"Conv2d", shape(channels, size), block.conv2.weight.size()});
    rows.push_back({"BatchNorm2d", shape(channels, size), 2 * block.bn2.channels()});
    if (block.has_projection()) {
      rows.push_back({"Conv2d", shape(channels, size), block.proj.weight.size()});
      rows.push_back({"BatchNorm2d", shape(channels, size), 2 * block.proj_bn.channels()});
    }
    rows.push_back({"ReLU", shape(channels, size), 0});
    rows.push_back({"BasicBlock", shape(channels, size), 0});
  }
  rows.push_back({"AdaptiveAvgPool2d", shape(channels, 1), 0});
  rows.push_back({"Linear", {-1, static_cast<long>(config_.num_classes)}, fc_weight_.size() + fc_bias_.size()});
  return rows;
}

template <typename T>
std::string ResNet<T>::summary_table() const {
  std::ostringstream out;
  char line[128];
  std::snprintf(line, sizeof line, "%20s  %25s  %10s\n", "Layer (type)", "Output Shape", "Param #");
  out << line;
  std::size_t total = 0;
  for (const auto& row : summary()) {
    std::string s = "[";
    for (std::size_t i = 0; i < row.output_shape.size(); ++i)
      s += (i ? ", " : "") + std::to_string(row.output_shape[i]);
    s += "]";
    std::snprintf(line, sizeof line, "%20s  %25s  %10zu\n", row.type.c_str(), s.c_str(), row.params);
    out << line;
    total += row.params;
  }
  out << "Total params: " << total << "\n";
  return out.str();
}

template <typename T>
Logits<T> softmax(const Logits<T>& logits) {
  Logits<T> p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    double z = 0.0;
    for (Eigen::Index k = 0; k < logits.cols(); ++k) z += std::exp(static_cast<double>(logits(r, k)) - m);
    for (Eigen::Index k = 0; k < logits.cols(); ++k)
      p(r, k) = static_cast<T>(std::exp(static_cast<double>(logits(r, k)) - m) / z);
  }
  return p;
}

template <typename T>
LossResult<T> softmax_cross_entropy(const Logits<T>& logits, std::span<const int> labels) {
  const auto n = logits.rows();
  require(n > 0 && static_cast<std::size_t>(n) == labels.size(), "one label per logit row required");
  LossResult<T> out;
  out.grad.resize(n, logits.cols());
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    if (label < 0 || label >= logits.cols())
      fail(Errc::invalid_argument, "label " + std::to_string(label) + " out of range");
    const double m = logits.row(r).maxCoeff();
    double z = 0.0;
    for (Eigen::Index k = 0; k < logits.cols(); ++k) z += std::exp(static_cast<double>(logits(r, k)) - m);
    const double log_z = m + std::log(z);
    total += log_z - static_cast<double>(logits(r, label));
    for (Eigen::Index k = 0; k < logits.cols(); ++k) {
      const double p = std::exp(static_cast<double>(logits(r, k)) - log_z);
      out.grad(r, k) = static_cast<T>((p - (k == label ? 1.0 : 0.0)) * inv_n);
    }
  }
  out.loss = total * inv_n;
  return out;
}

template <typename T>
std::vector<int> argmax_rows(const Logits<T>& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < logits.cols(); ++k)
      if (logits(r, k) > logits(r, best)) best = k;
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

template <typename T>
std::vector<double> predict_proba(const ResNet<T>& model, const Batch<T>& batch) {
  const Logits<T> p = softmax(model.predict(batch));
  std::vector<double> out(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index r = 0; r < p.rows(); ++r) out[static_cast<std::size_t>(r)] = p(r, static_cast<Eigen::Index>(kWavesClass));
  return out;
}

template class ResNet<float>;
template class ResNet<double>;
template LossResult<float> softmax_cross_entropy(const Logits<float>&, std::span<const int>);
template LossResult<double> softmax_cross_entropy(const Logits<double>&, std::span<const int>);
template Logits<float> softmax(const Logits<float>&);
template Logits<double> softmax(const Logits<double>&);
template std::vector<int> argmax_rows(const Logits<float>&);
template std::vector<int> argmax_rows(const Logits<double>&);
template std::vector<double> predict_proba(const ResNet<float>&, const Batch<float>&);
template std::vector<double> predict_proba(const ResNet<double>&, const Batch<double>&);

}  // namespace das
