#pragma once

#include "das/resnet.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace das {

namespace fs = std::filesystem;

// DASN layout: "DASN" | u32 LE version | u64 LE header_len | JSON header |
// float32 LE payload. Payload order: every convolution weight and batch-norm
// (weight, bias, running_mean, running_var) in network order, then fc.weight
// and fc.bias. The header's layer manifest records name, shape and offset.
inline constexpr char kCheckpointMagic[4] = {'D', 'A', 'S', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

struct CheckpointMeta {
  int epoch = 0;
  std::vector<EpochMetrics> history;
};

std::string checkpoint_header_json(const ResNet<float>& model, const CheckpointMeta& meta);
void save_checkpoint(const ResNet<float>& model, const fs::path& path,
                     const CheckpointMeta& meta = {});

struct LoadedCheckpoint {
  ResNet<float> model;
  CheckpointMeta meta;
};

// When expected is given, a stored config that differs raises config_mismatch.
LoadedCheckpoint load_checkpoint(const fs::path& path,
                                 const std::optional<ModelConfig>& expected = std::nullopt);

// Number of float32 values in the payload: parameters plus two running
// statistics per batch-norm channel.
std::size_t checkpoint_payload_floats(const ResNet<float>& model);

}  // namespace das
