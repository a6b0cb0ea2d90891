#include "das/store.hpp"

#include "das/error.hpp"
#include "das/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace das {

using nlohmann::json;

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint64_t get_le(const unsigned char* p, int n) {
  std::uint64_t v = 0;
  for (int i = n - 1; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace

std::string read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_bytes(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(Errc::io, "write failed for " + path.string());
}

std::string dasf_header_json(const DasSegment& segment) {
  const SegmentInfo& info = segment.info();
  json header = {
      {"n_channels", segment.n_channels()},
      {"n_samples", segment.n_samples()},
      {"sample_rate_hz", info.sample_rate_hz},
      {"channel_start", info.channel_start},
      {"channel_spacing_m", info.channel_spacing_m},
      {"start_time_ns", info.start_time_ns},
      {"dtype", "f32le"},
  };
  return header.dump();
}

void write_segment(const DasSegment& segment, const fs::path& path) {
  if (!segment.all_finite()) fail(Errc::non_finite, "segment contains non-finite values");
  const std::string header = dasf_header_json(segment);
  std::string bytes;
  bytes.reserve(kDasfPreambleBytes + header.size() + 4 * segment.values().size());
  bytes.append(kDasfMagic, 4);
  put_u32(bytes, kDasfVersion);
  put_u64(bytes, header.size());
  bytes += header;
  for (float v : segment.values()) put_u32(bytes, std::bit_cast<std::uint32_t>(v));
  write_file_bytes(path, bytes);
}

DasSegment read_segment(const fs::path& path) {
  const std::string bytes = read_file_bytes(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4 || std::memcmp(p, kDasfMagic, 4) != 0)
    fail(Errc::bad_magic, "bad magic in " + path.string());
  if (bytes.size() < kDasfPreambleBytes) fail(Errc::truncated, "truncated preamble");
  const auto version = static_cast<std::uint32_t>(get_le(p + 4, 4));
  if (version != kDasfVersion)
    fail(Errc::unsupported_version, "unsupported DASF version " + std::to_string(version));
  const std::uint64_t header_len = get_le(p + 8, 8);
  if (header_len > bytes.size() - kDasfPreambleBytes) fail(Errc::truncated, "truncated header");

  json header;
  try {
    header = json::parse(bytes.substr(kDasfPreambleBytes, header_len));
  } catch (const json::exception& e) {
    fail(Errc::bad_header, std::string("header is not valid JSON: ") + e.what());
  }
  std::size_t n_channels = 0, n_samples = 0;
  SegmentInfo info;
  try {
    if (header.at("dtype").get<std::string>() != "f32le")
      fail(Errc::bad_header, "unsupported dtype");
    n_channels = header.at("n_channels").get<std::size_t>();
    n_samples = header.at("n_samples").get<std::size_t>();
    info.sample_rate_hz = header.at("sample_rate_hz").get<double>();
    info.channel_start = header.at("channel_start").get<std::int64_t>();
    info.channel_spacing_m = header.at("channel_spacing_m").get<double>();
    info.start_time_ns = header.at("start_time_ns").get<std::int64_t>();
  } catch (const json::exception& e) {
    fail(Errc::bad_header, std::string("missing or malformed header key: ") + e.what());
  }
  if (n_channels == 0 || n_samples == 0) fail(Errc::bad_header, "empty segment shape");

  const std::size_t offset = kDasfPreambleBytes + header_len;
  const std::size_t payload = bytes.size() - offset;
  const std::size_t expected = n_channels * n_samples * 4;
  if (payload < expected)
    fail(Errc::truncated, "truncated payload: expected " + std::to_string(expected) +
                              " bytes, found " + std::to_string(payload));
  if (payload != expected)
    fail(Errc::size_mismatch, "header/payload size mismatch: expected " +
                                  std::to_string(expected) + " bytes, found " +
                                  std::to_string(payload));

  std::vector<float> data(n_channels * n_samples);
  for (std::size_t i = 0; i < data.size(); ++i)
    data[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(p + offset + 4 * i, 4)));
  DasSegment segment(n_channels, n_samples, std::move(data), info);
  if (!segment.all_finite()) fail(Errc::non_finite, "segment file contains non-finite values");
  return segment;
}

void write_pgm(const fs::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> pixels) {
  require(pixels.size() == width * height, "pgm pixel count mismatch");
  std::string bytes = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  bytes.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  write_file_bytes(path, bytes);
}

std::vector<std::uint8_t> read_pgm(const fs::path& path, std::size_t* width,
                                   std::size_t* height) {
  const std::string bytes = read_file_bytes(path);
  std::istringstream in(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5") fail(Errc::bad_magic, "not a binary PGM: " + path.string());
  if (!in || maxval != 255) fail(Errc::bad_header, "unsupported PGM header: " + path.string());
  in.get();  // single whitespace before raster
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() - offset < w * h) fail(Errc::truncated, "truncated PGM: " + path.string());
  if (width) *width = w;
  if (height) *height = h;
  const auto* begin = reinterpret_cast<const std::uint8_t*>(bytes.data()) + offset;
  return {begin, begin + w * h};
}

std::string_view label_name(CorpusLabel label) {
  return label == CorpusLabel::noise ? "noise" : "waves";
}

CorpusLabel parse_corpus_label(std::string_view name) {
  if (name == "noise") return CorpusLabel::noise;
  if (name == "waves") return CorpusLabel::waves;
  fail(Errc::unknown_label, "unknown label \"" + std::string(name) + "\"");
}

std::map<std::string, std::size_t> CorpusManifest::counts() const {
  std::map<std::string, std::size_t> out{{"noise", 0}, {"waves", 0}};
  for (const auto& r : records) ++out[std::string(label_name(r.label))];
  return out;
}

std::string CorpusManifest::to_json() const {
  json records_json = json::array();
  for (const auto& r : records) records_json.push_back({{"path", r.path}, {"label", label_name(r.label)}});
  json doc = {
      {"root", root.generic_string()},
      {"tile_size", tile_size},
      {"seed", seed},
      {"counts", counts()},
      {"records", std::move(records_json)},
  };
  return doc.dump(1);
}

CorpusManifest CorpusManifest::from_json(std::string_view text, const fs::path& root_override) {
  CorpusManifest m;
  try {
    const json doc = json::parse(text);
    m.root = root_override.empty() ? fs::path(doc.at("root").get<std::string>()) : root_override;
    m.tile_size = doc.at("tile_size").get<std::size_t>();
    m.seed = doc.at("seed").get<std::uint64_t>();
    for (const auto& r : doc.at("records"))
      m.records.push_back({r.at("path").get<std::string>(),
                           parse_corpus_label(r.at("label").get<std::string>())});
  } catch (const json::exception& e) {
    fail(Errc::bad_header, std::string("malformed manifest: ") + e.what());
  }
  return m;
}

void CorpusManifest::save(const fs::path& path) const { write_file_bytes(path, to_json() + "\n"); }

CorpusManifest CorpusManifest::load(const fs::path& path) {
  // Records are relative to the directory holding the manifest.
  return from_json(read_file_bytes(path), path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

std::string tile_file_name(const GrayTile& gray) {
  std::string name = "c" + std::to_string(gray.origin_channel) + "_s" +
                     std::to_string(gray.origin_sample) + "_t" + std::to_string(gray.tile_size);
  if (!gray.source.empty()) name += "_" + hex64(fnv1a(gray.source)).substr(0, 8);
  return name + ".pgm";
}

fs::path export_labeled_tile(const GrayTile& gray, std::string_view label, const fs::path& root,
                             CorpusManifest* manifest) {
  const CorpusLabel parsed = parse_corpus_label(label);
  const fs::path dir = root / std::string(label);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(Errc::io, "cannot create " + dir.string() + ": " + ec.message());
  const std::string name = tile_file_name(gray);
  const fs::path path = dir / name;
  write_pgm(path, gray.tile_size, gray.tile_size, gray.pixels);
  if (manifest) manifest->records.push_back({std::string(label) + "/" + name, parsed});
  return path;
}

}  // namespace das
