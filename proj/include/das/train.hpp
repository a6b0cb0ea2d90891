#pragma once

#include "das/checkpoint.hpp"
#include "das/resnet.hpp"
#include "das/store.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace das {

struct Hyperparams {
  double learning_rate = 0.001;
  double momentum = 0.9;
  std::size_t batch_size = 32;  // per replica
  int epochs = 50;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static Hyperparams from_json(std::string_view text);
};

// Grayscale tiles scaled to [0, 1], one label per tile.
struct ImageDataset {
  std::size_t tile_size = 0;
  std::vector<float> pixels;  // n * tile_size^2
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  ImageDataset subset(std::span<const std::size_t> indices) const;
  Batch<float> batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
};

ImageDataset load_image_dataset(const CorpusManifest& manifest, std::size_t n_workers = 1);

struct TrainValSplit {
  std::vector<std::size_t> train;  // indices into manifest.records, ascending
  std::vector<std::size_t> val;
};

// Stratified by label; each class is shuffled with its own seeded stream and
// round(fraction * class_size) records go to validation.
TrainValSplit split_train_val(const CorpusManifest& manifest, double val_fraction,
                              std::uint64_t seed);

struct Partition {
  std::size_t worker_rank = 0;
  std::size_t world_size = 1;
  std::vector<std::size_t> indices;
};

// Seeded shuffle of the index list, then strided assignment [rank::world].
Partition partition(std::span<const std::size_t> indices, std::size_t world_size,
                    std::size_t rank, std::uint64_t epoch_seed);

struct StepResult {
  double loss = 0.0;          // mean over replicas
  std::size_t correct = 0;    // train-mode argmax hits
  std::size_t samples = 0;
};

// K parameter-identical replicas. Each step computes per-replica gradients
// concurrently, averages them in rank order, applies one SGD-with-momentum
// update to every replica, then copies rank 0's batch-norm running statistics
// to the others. Replica state hashes are compared after every step.
class DataParallel {
public:
  DataParallel(const ResNet<float>& model, std::size_t world_size, const Hyperparams& hyper);

  std::size_t world_size() const { return replicas_.size(); }
  ResNet<float>& replica(std::size_t rank) { return replicas_.at(rank); }
  const ResNet<float>& replica(std::size_t rank) const { return replicas_.at(rank); }

  StepResult step(std::span<const Batch<float>> batches, std::span<const std::vector<int>> labels);
  void check_consistency() const;

private:
  std::vector<ResNet<float>> replicas_;
  std::vector<float> velocity_;
  std::vector<float> mean_grad_;
  Hyperparams hyper_;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t samples = 0;
};

// Eval-mode loss and argmax accuracy (ties go to the lower class index).
EvalResult evaluate(const ResNet<float>& model, const ImageDataset& data, std::size_t n_workers = 1);

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  double wall_seconds = 0.0;
  double samples_per_second = 0.0;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  std::size_t world_size = 1;
  std::string checkpoint;

  std::string to_json() const;
  std::string epochs_csv() const;
};

struct TrainOptions {
  fs::path checkpoint_path;  // written after the last epoch when non-empty
  std::function<void(const EpochMetrics&)> on_epoch;
};

ResNet<float> train(const CorpusManifest& manifest, const ModelConfig& config,
                    const Hyperparams& hyper, std::size_t world_size, TrainReport* report,
                    const TrainOptions& options = {});

struct ThroughputRow {
  std::size_t world_size = 1;
  double samples_per_second = 0.0;
  double fraction_of_ideal = 1.0;  // throughput / (world * throughput of the smallest world)
};

// Times a fixed number of data-parallel steps on random inputs.
std::vector<ThroughputRow> throughput_benchmark(const ModelConfig& config,
                                                std::span<const std::size_t> world_sizes,
                                                std::size_t steps, std::size_t batch_size,
                                                std::uint64_t seed);

}  // namespace das
