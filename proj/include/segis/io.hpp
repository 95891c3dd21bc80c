#pragma once

// File formats.
//
//   <name>.json  header: dims [X,Y,Z,C], dtype "f32", layout
//                "x-fastest-channels-last", spacing_mm [sx,sy,sz],
//                optional field_kind / seg_kind
//   <name>.raw   X*Y*Z*C little-endian float32
//
// Affine files are JSON objects {"matrix": [16 row-major], "convention":
// "target-to-source-voxel"}. Every writer goes through a temp file and a
// rename so readers never observe partial output.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include <json.hpp>

#include "volume.hpp"

namespace segis {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kLayoutName = "x-fastest-channels-last";
inline constexpr const char* kAffineConvention = "target-to-source-voxel";

namespace detail {

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

}  // namespace detail

/// Write bytes to `path` atomically (temp file + rename).
inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path() && !fs::is_directory(path.parent_path()))
    throw std::runtime_error("directory does not exist: " + path.parent_path().string());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void write_json_atomic(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

/// Base path without a trailing .json/.raw extension.
inline fs::path volume_base(fs::path p) {
  if (p.extension() == ".json" || p.extension() == ".raw") p.replace_extension();
  return p;
}

inline std::string encode_f32(std::span<const float> values) {
  std::string bytes(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t le = detail::to_little(std::bit_cast<std::uint32_t>(values[i]));
    std::memcpy(bytes.data() + 4 * i, &le, 4);
  }
  return bytes;
}

inline std::vector<float> decode_f32(std::string_view bytes) {
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t le;
    std::memcpy(&le, bytes.data() + 4 * i, 4);
    out[i] = std::bit_cast<float>(detail::to_little(le));
  }
  return out;
}

/// Saves a float32 volume. `extra` keys are merged into the header.
inline void save_volume(const Volume<float>& v, const fs::path& path, const json& extra = json::object()) {
  const fs::path base = volume_base(path);
  json header = {{"dims", {v.nx(), v.ny(), v.nz(), v.channels()}},
                 {"dtype", "f32"},
                 {"layout", kLayoutName},
                 {"spacing_mm", {v.spacing()[0], v.spacing()[1], v.spacing()[2]}}};
  for (auto it = extra.begin(); it != extra.end(); ++it) header[it.key()] = it.value();
  fs::path raw = base;
  raw += ".raw";
  fs::path hdr = base;
  hdr += ".json";
  write_file_atomic(raw, encode_f32(v.voxels()));
  write_json_atomic(hdr, header);
}

template <typename T>
void save_volume(const Volume<T>& v, const fs::path& path, const json& extra = json::object()) {
  save_volume(v.template cast<float>(), path, extra);
}

inline json load_volume_header(const fs::path& path) {
  fs::path hdr = volume_base(path);
  hdr += ".json";
  if (!fs::exists(hdr)) throw DataError("missing volume header " + hdr.string());
  return detail::read_json(hdr);
}

inline Volume<float> load_volume(const fs::path& path) {
  const fs::path base = volume_base(path);
  const json header = load_volume_header(base);
  Dims dims;
  Spacing spacing{};
  try {
    const auto d = header.at("dims").get<std::vector<int>>();
    if (d.size() != 4) throw DataError("dims must have 4 entries");
    dims = {d[0], d[1], d[2], d[3]};
    const auto s = header.at("spacing_mm").get<std::vector<double>>();
    if (s.size() != 3) throw DataError("spacing_mm must have 3 entries");
    spacing = {s[0], s[1], s[2]};
    if (header.at("dtype").get<std::string>() != "f32") throw DataError("unsupported dtype");
    if (header.at("layout").get<std::string>() != kLayoutName) throw DataError("unsupported layout");
  } catch (const json::exception& e) {
    throw DataError("bad volume header " + base.string() + ": " + e.what());
  }
  if (dims.x <= 0 || dims.y <= 0 || dims.z <= 0 || dims.c <= 0) throw DataError("dims must be positive");
  fs::path raw = base;
  raw += ".raw";
  if (!fs::exists(raw)) throw DataError("missing volume payload " + raw.string());
  const std::string bytes = detail::read_text(raw);
  if (bytes.size() != dims.count() * 4)
    throw DataError("payload size mismatch for " + raw.string() + ": expected " + std::to_string(dims.count()) +
                    " floats, found " + std::to_string(bytes.size() / 4) +
                    (bytes.size() % 4 ? " (+ trailing bytes)" : ""));
  Volume<float> v(dims, decode_f32(bytes), spacing);
  if (!v.all_finite()) throw DataError("non-finite voxel values in " + raw.string());
  return v;
}

inline void save_segmentation(const SegmentationSet<float>& s, const fs::path& path) {
  save_volume(s.volume(), path, {{"seg_kind", s.kind() == SegKind::binary ? "binary" : "probabilistic"}});
}

inline SegmentationSet<float> load_segmentation(const fs::path& path) {
  const json header = load_volume_header(path);
  const SegKind kind = header.value("seg_kind", std::string("probabilistic")) == "binary" ? SegKind::binary
                                                                                          : SegKind::probabilistic;
  return SegmentationSet<float>(load_volume(path), kind);
}

inline json affine_to_json(const AffineTransform& a) {
  return {{"matrix", a.matrix()}, {"convention", kAffineConvention}};
}

inline AffineTransform affine_from_json(const json& j) {
  try {
    if (j.at("convention").get<std::string>() != kAffineConvention)
      throw DataError("unsupported affine convention");
    const auto m = j.at("matrix").get<std::vector<double>>();
    if (m.size() != 16) throw DataError("affine matrix must have 16 entries");
    AffineTransform::Matrix arr{};
    std::copy(m.begin(), m.end(), arr.begin());
    return AffineTransform(arr);
  } catch (const json::exception& e) {
    throw DataError(std::string("bad affine: ") + e.what());
  }
}

inline void save_affine(const AffineTransform& a, const fs::path& path) { write_json_atomic(path, affine_to_json(a)); }

inline AffineTransform load_affine(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("missing affine file " + path.string());
  return affine_from_json(detail::read_json(path));
}

}  // namespace segis
