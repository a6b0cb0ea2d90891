#include "das/train.hpp"

#include "das/error.hpp"
#include "das/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

namespace das {

using nlohmann::json;

void Hyperparams::validate() const {
  require(learning_rate >= 0.0 && std::isfinite(learning_rate), "learning_rate must be non-negative");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
  require(batch_size > 0, "batch_size must be positive");
  require(epochs > 0, "epochs must be positive");
  require(val_fraction > 0.0 && val_fraction < 1.0, "val_fraction must lie in (0, 1)");
}

std::string Hyperparams::to_json() const {
  return json{{"learning_rate", learning_rate}, {"momentum", momentum},
              {"batch_size", batch_size},       {"epochs", epochs},
              {"val_fraction", val_fraction},   {"seed", seed}}
      .dump();
}

Hyperparams Hyperparams::from_json(std::string_view text) {
  Hyperparams h;
  try {
    const json j = json::parse(text);
    h.learning_rate = j.value("learning_rate", h.learning_rate);
    h.momentum = j.value("momentum", h.momentum);
    h.batch_size = j.value("batch_size", h.batch_size);
    h.epochs = j.value("epochs", h.epochs);
    h.val_fraction = j.value("val_fraction", h.val_fraction);
    h.seed = j.value("seed", h.seed);
  } catch (const json::exception& e) {
    fail(Errc::bad_header, std::string("malformed hyperparameters: ") + e.what());
  }
  h.validate();
  return h;
}

ImageDataset ImageDataset::subset(std::span<const std::size_t> indices) const {
  ImageDataset out;
  out.tile_size = tile_size;
  const std::size_t per = tile_size * tile_size;
  out.pixels.resize(indices.size() * per);
  out.labels.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < size(), "dataset index out of range");
    std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(i * per));
    out.labels[i] = labels[indices[i]];
  }
  return out;
}

Batch<float> ImageDataset::batch(std::span<const std::size_t> indices) const {
  Batch<float> b(indices.size(), 1, tile_size, tile_size);
  const std::size_t per = tile_size * tile_size;
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                b.data.begin() + static_cast<std::ptrdiff_t>(i * per));
  return b;
}

std::vector<int> ImageDataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels[indices[i]];
  return out;
}

ImageDataset load_image_dataset(const CorpusManifest& manifest, std::size_t n_workers) {
  require(!manifest.records.empty(), "manifest has no records");
  ImageDataset data;
  data.tile_size = manifest.tile_size;
  const std::size_t per = data.tile_size * data.tile_size;
  data.pixels.resize(manifest.records.size() * per);
  data.labels.resize(manifest.records.size());
  parallel_for(manifest.records.size(), n_workers, [&](std::size_t i) {
    const auto& r = manifest.records[i];
    std::size_t w = 0, h = 0;
    const auto raw = read_pgm(manifest.root / r.path, &w, &h);
    if (w != data.tile_size || h != data.tile_size)
      fail(Errc::shape_mismatch, r.path + " is " + std::to_string(w) + "x" + std::to_string(h) +
                                     ", manifest tile size is " + std::to_string(data.tile_size));
    float* dst = data.pixels.data() + i * per;
    for (std::size_t k = 0; k < per; ++k) dst[k] = static_cast<float>(raw[k]) / 255.0f;
    data.labels[i] = static_cast<int>(r.label);
  });
  return data;
}

TrainValSplit split_train_val(const CorpusManifest& manifest, double val_fraction, std::uint64_t seed) {
  require(!manifest.records.empty(), "manifest has no records");
  require(val_fraction > 0.0 && val_fraction < 1.0, "val_fraction must lie in (0, 1)");
  TrainValSplit split;
  for (int label = 0; label < kNumCorpusLabels; ++label) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < manifest.records.size(); ++i)
      if (static_cast<int>(manifest.records[i].label) == label) members.push_back(i);
    if (members.empty()) continue;
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(members.size())));
    if (n_val == 0 || n_val == members.size())
      fail(Errc::invalid_argument,
           "val_fraction " + std::to_string(val_fraction) + " leaves an empty side for label " +
               std::string(label_name(static_cast<CorpusLabel>(label))));
    const auto order = seeded_permutation(members.size(), mix_seed(seed, static_cast<std::uint64_t>(label)));
    for (std::size_t k = 0; k < members.size(); ++k)
      (k < n_val ? split.val : split.train).push_back(members[order[k]]);
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  return split;
}

Partition partition(std::span<const std::size_t> indices, std::size_t world_size, std::size_t rank,
                    std::uint64_t epoch_seed) {
  require(world_size >= 1, "world_size must be at least 1");
  if (rank >= world_size)
    fail(Errc::invalid_argument, "rank " + std::to_string(rank) + " out of range for world " +
                                     std::to_string(world_size));
  Partition p;
  p.worker_rank = rank;
  p.world_size = world_size;
  const auto order = seeded_permutation(indices.size(), epoch_seed);
  for (std::size_t k = rank; k < order.size(); k += world_size) p.indices.push_back(indices[order[k]]);
  return p;
}

DataParallel::DataParallel(const ResNet<float>& model, std::size_t world_size, const Hyperparams& hyper)
    : hyper_(hyper) {
  require(world_size >= 1, "world_size must be at least 1");
  require(hyper.learning_rate >= 0.0 && hyper.momentum >= 0.0 && hyper.momentum < 1.0,
          "invalid optimizer settings");
  replicas_.reserve(world_size);
  for (std::size_t r = 0; r < world_size; ++r) replicas_.push_back(model);
  velocity_.assign(model.parameter_count(), 0.0f);
  mean_grad_.assign(model.parameter_count(), 0.0f);
}

StepResult DataParallel::step(std::span<const Batch<float>> batches,
                              std::span<const std::vector<int>> labels) {
  const std::size_t world = replicas_.size();
  require(batches.size() == world && labels.size() == world, "one batch per replica required");
  std::vector<double> losses(world, 0.0);
  std::vector<std::size_t> correct(world, 0);
  parallel_for(world, world, [&](std::size_t r) {
    ResNet<float>& m = replicas_[r];
    m.zero_grad();
    const Logits<float> logits = m.forward(batches[r], Mode::train);
    const LossResult<float> loss = softmax_cross_entropy(logits, labels[r]);
    m.backward(loss.grad);
    losses[r] = loss.loss;
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct[r] += pred[i] == labels[r][i];
  });

  // All-reduce: fixed rank order keeps the float sums reproducible.
  std::vector<std::vector<StateRef<float>>> refs;
  for (auto& m : replicas_) refs.push_back(m.state());
  const float inv_world = 1.0f / static_cast<float>(world);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < refs[0].size(); ++k) {
    if (!refs[0][k].trainable) continue;
    for (std::size_t i = 0; i < refs[0][k].size; ++i) {
      float sum = 0.0f;
      for (std::size_t r = 0; r < world; ++r) sum += refs[r][k].grad[i];
      mean_grad_[offset + i] = world == 1 ? sum : sum * inv_world;
    }
    offset += refs[0][k].size;
  }
  const auto lr = static_cast<float>(hyper_.learning_rate);
  const auto mu = static_cast<float>(hyper_.momentum);
  for (std::size_t i = 0; i < velocity_.size(); ++i) velocity_[i] = mu * velocity_[i] + mean_grad_[i];
  for (std::size_t r = 0; r < world; ++r) {
    offset = 0;
    for (std::size_t k = 0; k < refs[r].size(); ++k) {
      auto& ref = refs[r][k];
      if (ref.trainable) {
        for (std::size_t i = 0; i < ref.size; ++i) ref.value[i] -= lr * velocity_[offset + i];
        offset += ref.size;
      } else if (r > 0) {
        std::copy_n(refs[0][k].value, ref.size, ref.value);
      }
    }
  }
  check_consistency();

  StepResult out;
  for (std::size_t r = 0; r < world; ++r) {
    out.loss += losses[r];
    out.correct += correct[r];
    out.samples += labels[r].size();
  }
  out.loss /= static_cast<double>(world);
  return out;
}

void DataParallel::check_consistency() const {
  const std::uint64_t h0 = replicas_[0].state_hash();
  for (std::size_t r = 1; r < replicas_.size(); ++r) {
    const std::uint64_t h = replicas_[r].state_hash();
    if (h != h0)
      fail(Errc::replica_divergence, "replica " + std::to_string(r) + " state hash " + hex64(h) +
                                         " differs from rank 0 (" + hex64(h0) + ")");
  }
}

EvalResult evaluate(const ResNet<float>& model, const ImageDataset& data, std::size_t n_workers) {
  if (data.size() == 0) fail(Errc::invalid_argument, "cannot evaluate on an empty dataset");
  constexpr std::size_t kChunk = 64;
  const std::size_t n_chunks = (data.size() + kChunk - 1) / kChunk;
  std::vector<double> loss_sum(n_chunks, 0.0);
  std::vector<std::size_t> hits(n_chunks, 0);
  parallel_for(n_chunks, n_workers, [&](std::size_t c) {
    const std::size_t begin = c * kChunk;
    const std::size_t end = std::min(data.size(), begin + kChunk);
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    const Logits<float> logits = model.predict(data.batch(idx));
    const auto labels = data.batch_labels(idx);
    loss_sum[c] = softmax_cross_entropy(logits, labels).loss * static_cast<double>(idx.size());
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < pred.size(); ++i) hits[c] += pred[i] == labels[i];
  });
  EvalResult out;
  out.samples = data.size();
  for (std::size_t c = 0; c < n_chunks; ++c) {
    out.loss += loss_sum[c];
    out.accuracy += static_cast<double>(hits[c]);
  }
  out.loss /= static_cast<double>(data.size());
  out.accuracy /= static_cast<double>(data.size());
  return out;
}

std::string TrainReport::to_json() const {
  json epochs_json = json::array();
  for (const auto& e : epochs)
    epochs_json.push_back({{"epoch", e.epoch},
                           {"train_loss", e.train_loss},
                           {"train_accuracy", e.train_accuracy},
                           {"val_accuracy", e.val_accuracy}});
  return json{{"epochs", std::move(epochs_json)},
              {"wall_seconds", wall_seconds},
              {"samples_per_second", samples_per_second},
              {"n_train", n_train},
              {"n_val", n_val},
              {"world_size", world_size},
              {"checkpoint", checkpoint}}
      .dump(1);
}

std::string TrainReport::epochs_csv() const {
  std::ostringstream out;
  out.precision(9);
  out << "epoch,train_loss,train_acc,val_acc\n";
  for (const auto& e : epochs)
    out << e.epoch << ',' << e.train_loss << ',' << e.train_accuracy << ',' << e.val_accuracy << '\n';
  return out.str();
}

ResNet<float> train(const CorpusManifest& manifest, const ModelConfig& config, const Hyperparams& hyper,
                    std::size_t world_size, TrainReport* report, const TrainOptions& options) {
  config.validate();
  hyper.validate();
  require(world_size >= 1, "world_size must be at least 1");
  if (manifest.tile_size != config.input_size)
    fail(Errc::shape_mismatch, "corpus tile size " + std::to_string(manifest.tile_size) +
                                   " does not match model input size " + std::to_string(config.input_size));
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();

  const ImageDataset all = load_image_dataset(manifest, world_size);
  const TrainValSplit split = split_train_val(manifest, hyper.val_fraction, hyper.seed);
  const ImageDataset val = all.subset(split.val);

  DataParallel dp(ResNet<float>(config), world_size, hyper);
  TrainReport rep;
  rep.n_train = split.train.size();
  rep.n_val = split.val.size();
  rep.world_size = world_size;
  double train_seconds = 0.0;
  std::size_t trained = 0;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    const std::uint64_t epoch_seed = mix_seed(hyper.seed, 1000 + static_cast<std::uint64_t>(epoch));
    std::vector<Partition> parts;
    std::size_t min_part = split.train.size();
    for (std::size_t r = 0; r < world_size; ++r) {
      parts.push_back(partition(split.train, world_size, r, epoch_seed));
      min_part = std::min(min_part, parts.back().indices.size());
    }
    const std::size_t steps = min_part / hyper.batch_size;
    if (steps == 0)
      fail(Errc::invalid_argument, "batch_size " + std::to_string(hyper.batch_size) +
                                       " exceeds the per-worker partition (" + std::to_string(min_part) + ")");
    const auto te = clock::now();
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    std::vector<Batch<float>> batches(world_size);
    std::vector<std::vector<int>> labels(world_size);
    for (std::size_t s = 0; s < steps; ++s) {
      for (std::size_t r = 0; r < world_size; ++r) {
        const std::span<const std::size_t> idx(parts[r].indices.data() + s * hyper.batch_size, hyper.batch_size);
        batches[r] = all.batch(idx);
        labels[r] = all.batch_labels(idx);
      }
      const StepResult res = dp.step(batches, labels);
      loss_sum += res.loss;
      correct += res.correct;
      seen += res.samples;
    }
    train_seconds += std::chrono::duration<double>(clock::now() - te).count();
    trained += seen;

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.train_loss = loss_sum / static_cast<double>(steps);
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    m.val_accuracy = evaluate(dp.replica(0), val, world_size).accuracy;
    rep.epochs.push_back(m);
    if (options.on_epoch) options.on_epoch(m);
  }
  rep.wall_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  rep.samples_per_second = train_seconds > 0.0 ? static_cast<double>(trained) / train_seconds : 0.0;

  ResNet<float> model = dp.replica(0);
  if (!options.checkpoint_path.empty()) {
    save_checkpoint(model, options.checkpoint_path, {hyper.epochs, rep.epochs});
    rep.checkpoint = options.checkpoint_path.string();
  }
  if (report) *report = std::move(rep);
  return model;
}

std::vector<ThroughputRow> throughput_benchmark(const ModelConfig& config,
                                                std::span<const std::size_t> world_sizes,
                                                std::size_t steps, std::size_t batch_size,
                                                std::uint64_t seed) {
  config.validate();
  require(!world_sizes.empty() && steps > 0 && batch_size > 0, "benchmark needs worlds, steps and a batch size");
  Hyperparams hyper;
  hyper.batch_size = batch_size;
  const ResNet<float> base(config);
  std::vector<ThroughputRow> rows;
  for (std::size_t world : world_sizes) {
    require(world >= 1, "world sizes must be positive");
    Rng rng(mix_seed(seed, world));
    std::uniform_real_distribution<float> pixel(0.0f, 1.0f);
    std::vector<Batch<float>> batches;
    std::vector<std::vector<int>> labels;
    for (std::size_t r = 0; r < world; ++r) {
      batches.emplace_back(batch_size, config.in_channels, config.input_size, config.input_size);
      for (float& v : batches.back().data) v = pixel(rng);
      labels.emplace_back(batch_size);
      for (std::size_t i = 0; i < batch_size; ++i) labels.back()[i] = static_cast<int>(i % config.num_classes);
    }
    DataParallel dp(base, world, hyper);
    dp.step(batches, labels);  // warm-up
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t s = 0; s < steps; ++s) dp.step(batches, labels);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back({world, static_cast<double>(steps * batch_size * world) / secs, 1.0});
  }
  const auto base_row = std::min_element(rows.begin(), rows.end(),
                                         [](const auto& a, const auto& b) { return a.world_size < b.world_size; });
  const double per_worker = base_row->samples_per_second / static_cast<double>(base_row->world_size);
  for (auto& row : rows)
    row.fraction_of_ideal = row.samples_per_second / (per_worker * static_cast<double>(row.world_size));
  return rows;
}

}  // namespace das
