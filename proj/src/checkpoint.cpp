#include "das/checkpoint.hpp"

#include "das/error.hpp"
#include "das/store.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>

namespace das {

using nlohmann::json;

namespace {

void put_le(std::string& out, std::uint64_t v, int n) {
  for (int i = 0; i < n; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint64_t get_le(const unsigned char* p, int n) {
  std::uint64_t v = 0;
  for (int i = n - 1; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

json history_json(const std::vector<EpochMetrics>& history) {
  json out = json::array();
  for (const auto& m : history)
    out.push_back({{"epoch", m.epoch},
                   {"train_loss", m.train_loss},
                   {"train_accuracy", m.train_accuracy},
                   {"val_accuracy", m.val_accuracy}});
  return out;
}

}  // namespace

std::size_t checkpoint_payload_floats(const ResNet<float>& model) {
  return model.parameter_count() + 2 * model.batch_norm_channels();
}

std::string checkpoint_header_json(const ResNet<float>& model, const CheckpointMeta& meta) {
  json layers = json::array();
  std::size_t offset = 0;
  for (const auto& ref : model.state()) {
    layers.push_back({{"name", ref.name},
                      {"shape", ref.shape},
                      {"offset", offset},
                      {"kind", ref.trainable ? "parameter" : "buffer"}});
    offset += ref.size;
  }
  json header = {
      {"config", json::parse(model.config().to_json())},
      {"epoch", meta.epoch},
      {"history", history_json(meta.history)},
      {"layers", std::move(layers)},
      {"n_values", offset},
      {"dtype", "f32le"},
  };
  return header.dump();
}

void save_checkpoint(const ResNet<float>& model, const fs::path& path, const CheckpointMeta& meta) {
  const std::string header = checkpoint_header_json(model, meta);
  std::string bytes(kCheckpointMagic, 4);
  put_le(bytes, kCheckpointVersion, 4);
  put_le(bytes, header.size(), 8);
  bytes += header;
  for (const auto& ref : model.state())
    for (std::size_t i = 0; i < ref.size; ++i) put_le(bytes, std::bit_cast<std::uint32_t>(ref.value[i]), 4);
  write_file_bytes(path, bytes);
}

LoadedCheckpoint load_checkpoint(const fs::path& path, const std::optional<ModelConfig>& expected) {
  const std::string bytes = read_file_bytes(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4 || std::memcmp(p, kCheckpointMagic, 4) != 0)
    fail(Errc::bad_magic, "not a checkpoint: " + path.string());
  if (bytes.size() < 16) fail(Errc::truncated, "truncated checkpoint preamble");
  const auto version = static_cast<std::uint32_t>(get_le(p + 4, 4));
  if (version != kCheckpointVersion)
    fail(Errc::unsupported_version, "unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t header_len = get_le(p + 8, 8);
  if (header_len > bytes.size() - 16) fail(Errc::truncated, "truncated checkpoint header");

  json header;
  ModelConfig config;
  CheckpointMeta meta;
  try {
    header = json::parse(bytes.substr(16, header_len));
    config = ModelConfig::from_json(header.at("config").dump());
    meta.epoch = header.value("epoch", 0);
    for (const auto& h : header.value("history", json::array()))
      meta.history.push_back({h.at("epoch").get<int>(), h.at("train_loss").get<double>(),
                              h.at("train_accuracy").get<double>(), h.at("val_accuracy").get<double>()});
  } catch (const json::exception& e) {
    fail(Errc::bad_header, std::string("malformed checkpoint header: ") + e.what());
  }
  if (expected && !(*expected == config))
    fail(Errc::config_mismatch, "checkpoint config " + config.to_json() + " does not match expected " +
                                    expected->to_json());

  LoadedCheckpoint out{ResNet<float>(config), meta};
  auto refs = out.model.state();
  const json& layers = header.at("layers");
  if (layers.size() != refs.size())
    fail(Errc::bad_header, "checkpoint layer manifest does not match the model");
  std::size_t offset = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const json& l = layers[i];
    if (l.value("name", "") != refs[i].name ||
        l.value("shape", std::vector<std::size_t>{}) != refs[i].shape ||
        l.value("offset", std::size_t{0}) != offset)
      fail(Errc::bad_header, "checkpoint layer " + std::to_string(i) + " does not match " + refs[i].name);
    offset += refs[i].size;
  }
  const std::size_t payload = bytes.size() - 16 - header_len;
  if (payload < 4 * offset) fail(Errc::truncated, "truncated checkpoint payload");
  if (payload != 4 * offset) fail(Errc::size_mismatch, "checkpoint payload size mismatch");
  const unsigned char* src = p + 16 + header_len;
  for (auto& ref : refs)
    for (std::size_t i = 0; i < ref.size; ++i, src += 4)
      ref.value[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(src, 4)));
  return out;
}

}  // namespace das
