#pragma once

#include "das/segment.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace das {

namespace fs = std::filesystem;

// DASF layout: "DASF" | u32 LE version | u64 LE header_len | JSON header |
// n_channels * n_samples float32 LE, channel-major.
inline constexpr char kDasfMagic[4] = {'D', 'A', 'S', 'F'};
inline constexpr std::uint32_t kDasfVersion = 1;
inline constexpr std::size_t kDasfPreambleBytes = 16;

// Whole-file helpers; throw Errc::io.
std::string read_file_bytes(const fs::path& path);
void write_file_bytes(const fs::path& path, std::string_view bytes);

std::string dasf_header_json(const DasSegment& segment);
void write_segment(const DasSegment& segment, const fs::path& path);
DasSegment read_segment(const fs::path& path);

// Binary PGM ("P5", maxval 255).
void write_pgm(const fs::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> pixels);
std::vector<std::uint8_t> read_pgm(const fs::path& path, std::size_t* width = nullptr,
                                   std::size_t* height = nullptr);

// Training corpus classes, indexed alphabetically.
enum class CorpusLabel : int { noise = 0, waves = 1 };
inline constexpr int kNumCorpusLabels = 2;

std::string_view label_name(CorpusLabel label);
CorpusLabel parse_corpus_label(std::string_view name);  // throws unknown_label

struct CorpusRecord {
  std::string path;  // relative to the manifest root, e.g. "waves/c0_s0_t50.pgm"
  CorpusLabel label = CorpusLabel::noise;

  friend bool operator==(const CorpusRecord&, const CorpusRecord&) = default;
};

struct CorpusManifest {
  fs::path root;
  std::size_t tile_size = 0;
  std::uint64_t seed = 0;
  std::vector<CorpusRecord> records;

  std::map<std::string, std::size_t> counts() const;
  std::string to_json() const;
  static CorpusManifest from_json(std::string_view text, const fs::path& root_override = {});
  void save(const fs::path& path) const;
  static CorpusManifest load(const fs::path& path);
};

// c<channel>_s<sample>_t<size>[_<hash8>].pgm; the hash suffix appears when the
// tile carries a source identifier.
std::string tile_file_name(const GrayTile& gray);

fs::path export_labeled_tile(const GrayTile& gray, std::string_view label, const fs::path& root,
                             CorpusManifest* manifest = nullptr);

}  // namespace das
