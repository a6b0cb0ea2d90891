#pragma once

#include "das/nn.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace das {

struct ModelConfig {
  int depth = 8;  // 6n + 2, n blocks per stage
  std::array<std::size_t, 3> stage_widths{16, 32, 64};
  std::size_t in_channels = 1;
  std::size_t num_classes = 2;
  std::size_t input_size = 200;
  std::uint64_t seed = 0;

  std::size_t blocks_per_stage() const { return static_cast<std::size_t>((depth - 2) / 6); }
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(std::string_view text);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Index of the "waves" class (labels are indexed alphabetically).
inline constexpr std::size_t kWavesClass = 1;

struct LayerSummary {
  std::string type;                 // Conv2d, BatchNorm2d, ReLU, BasicBlock, AdaptiveAvgPool2d, Linear
  std::vector<long> output_shape;   // leading -1 for the batch dimension
  std::size_t params = 0;
};

template <typename T>
using Logits = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// NCHW batch as fed to the network.
template <typename T>
struct Batch {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  Buffer<T> data;

  Batch() = default;
  Batch(std::size_t n_, std::size_t c_, std::size_t h_, std::size_t w_)
      : n(n_), c(c_), h(h_), w(w_), data(n_ * c_ * h_ * w_, T(0)) {}
  std::array<std::size_t, 4> shape() const { return {n, c, h, w}; }
  std::span<T> sample(std::size_t i) { return {data.data() + i * c * h * w, c * h * w}; }
  std::span<const T> sample(std::size_t i) const { return {data.data() + i * c * h * w, c * h * w}; }
};

enum class Mode { train, eval };

// A named slice of the model state: a trainable parameter or a batch-norm
// running statistic.
template <typename T>
struct StateRef {
  std::string name;
  std::vector<std::size_t> shape;
  T* value = nullptr;
  T* grad = nullptr;  // null for running statistics
  std::size_t size = 0;
  bool trainable = true;
};

template <typename T>
class ResNet {
public:
  explicit ResNet(const ModelConfig& config);
  ResNet(const ResNet& other);
  ResNet& operator=(const ResNet& other);
  ResNet(ResNet&&) noexcept;
  ResNet& operator=(ResNet&&) noexcept;
  ~ResNet();

  const ModelConfig& config() const { return config_; }

  // Train mode uses batch statistics (unless batch norm is frozen) and updates
  // running statistics; eval mode is a pure function of the parameters.
  Logits<T> forward(const Batch<T>& batch, Mode mode);
  Logits<T> predict(const Batch<T>& batch) const;
  // Accumulates parameter gradients from the cached train-mode forward.
  void backward(const Logits<T>& dlogits);

  // With frozen batch norm, train-mode forward normalizes with the running
  // statistics and leaves them untouched; gamma/beta still learn.
  void set_batch_norm_frozen(bool frozen) { bn_frozen_ = frozen; }
  bool batch_norm_frozen() const { return bn_frozen_; }

  void zero_grad();
  // Parameters and running statistics in checkpoint order.
  std::vector<StateRef<T>> state();
  std::vector<StateRef<const T>> state() const;
  std::size_t parameter_count() const;
  std::size_t batch_norm_channels() const;

  std::vector<T> flat_parameters() const;
  std::vector<T> flat_gradients() const;
  void set_flat_parameters(std::span<const T> values);
  // FNV-1a over parameters and running statistics.
  std::uint64_t state_hash() const;

  std::vector<LayerSummary> summary() const;
  std::string summary_table() const;

private:
  struct TrainState;

  void build();
  Logits<T> run(const Batch<T>& batch, bool train);

  ModelConfig config_;
  nn::Conv2d<T> stem_conv_;
  nn::BatchNorm2d<T> stem_bn_;
  std::vector<nn::BasicBlock<T>> blocks_;
  nn::Param<T> fc_weight_;
  nn::Param<T> fc_bias_;
  bool bn_frozen_ = false;
  std::unique_ptr<TrainState> state_;
};

template <typename T>
struct LossResult {
  double loss = 0.0;
  Logits<T> grad;  // dLoss/dLogits
};

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
LossResult<T> softmax_cross_entropy(const Logits<T>& logits, std::span<const int> labels);

template <typename T>
Logits<T> softmax(const Logits<T>& logits);

// Ties resolve to the lower class index.
template <typename T>
std::vector<int> argmax_rows(const Logits<T>& logits);

// p(waves) per sample, evaluated in eval mode.
template <typename T>
std::vector<double> predict_proba(const ResNet<T>& model, const Batch<T>& batch);

}  // namespace das
