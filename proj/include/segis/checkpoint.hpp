#pragma once

// Checkpoint = JSON manifest (config, epoch, seed, layer shapes) plus a raw
// little-endian float32 payload holding every parameter buffer in layer
// order, theta before psi. Reload restores bitwise-identical parameters.

#include <optional>
#include <string>

#include "io.hpp"
#include "network.hpp"

namespace segis {

struct Checkpoint {
  NetworkConfig config;
  std::optional<Stream<float>> theta;
  std::optional<Stream<float>> psi;
  std::string mode;
  int epoch = 0;
  std::uint64_t seed = 0;
};

inline json network_config_to_json(const NetworkConfig& c) {
  return {{"image_channels", c.image_channels}, {"structures", c.structures}, {"depth", c.depth},
          {"base_width", c.base_width}};
}

inline NetworkConfig network_config_from_json(const json& j) {
  NetworkConfig c;
  c.image_channels = j.at("image_channels").get<int>();
  c.structures = j.at("structures").get<int>();
  c.depth = j.at("depth").get<int>();
  c.base_width = j.at("base_width").get<int>();
  return c;
}

namespace detail {

inline json layers_to_json(const Stream<float>& s) {
  json arr = json::array();
  for (const auto& p : s.params())
    arr.push_back({{"in", p.in_channels},
                   {"out", p.out_channels},
                   {"ksize", p.ksize},
                   {"norm", p.has_norm},
                   {"activation", to_string(p.activation)}});
  return arr;
}

inline void append_stream(const Stream<float>& s, std::vector<float>& flat) {
  for (const auto& p : s.params()) p.for_each_buffer([&](const std::vector<float>& b) { flat.insert(flat.end(), b.begin(), b.end()); });
}

inline Stream<float> read_stream(const StreamConfig& cfg, const std::vector<float>& flat, std::size_t& offset) {
  Stream<float> shape(cfg, 0);
  auto params = shape.params();
  for (auto& p : params)
    p.for_each_buffer([&](std::vector<float>& b) {
      if (offset + b.size() > flat.size()) throw DataError("checkpoint payload too short");
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), b.size(), b.begin());
      offset += b.size();
    });
  return Stream<float>(cfg, std::move(params));
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  const fs::path base = volume_base(path);
  std::vector<float> flat;
  json manifest = {{"format", "segis-checkpoint-1"},
                   {"dtype", "f32"},
                   {"mode", ck.mode},
                   {"epoch", ck.epoch},
                   {"seed", ck.seed},
                   {"config", network_config_to_json(ck.config)}};
  if (ck.theta) {
    manifest["theta_layers"] = detail::layers_to_json(*ck.theta);
    detail::append_stream(*ck.theta, flat);
  }
  if (ck.psi) {
    manifest["psi_layers"] = detail::layers_to_json(*ck.psi);
    detail::append_stream(*ck.psi, flat);
  }
  manifest["parameter_count"] = flat.size();
  fs::path raw = base, hdr = base;
  raw += ".raw";
  hdr += ".json";
  write_file_atomic(raw, encode_f32(flat));
  write_json_atomic(hdr, manifest);
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  const fs::path base = volume_base(path);
  fs::path raw = base, hdr = base;
  raw += ".raw";
  hdr += ".json";
  if (!fs::exists(hdr) || !fs::exists(raw)) throw DataError("missing checkpoint " + base.string());
  const json m = detail::read_json(hdr);
  Checkpoint ck;
  std::vector<float> flat;
  try {
    if (m.at("format").get<std::string>() != "segis-checkpoint-1") throw DataError("unknown checkpoint format");
    ck.config = network_config_from_json(m.at("config"));
    ck.mode = m.at("mode").get<std::string>();
    ck.epoch = m.at("epoch").get<int>();
    ck.seed = m.at("seed").get<std::uint64_t>();
    flat = decode_f32(detail::read_text(raw));
    if (flat.size() != m.at("parameter_count").get<std::size_t>()) throw DataError("checkpoint payload size mismatch");
    std::size_t offset = 0;
    if (m.contains("theta_layers")) ck.theta = detail::read_stream(ck.config.seg(), flat, offset);
    if (m.contains("psi_layers")) ck.psi = detail::read_stream(ck.config.reg(), flat, offset);
    if (offset != flat.size()) throw DataError("checkpoint payload has trailing data");
  } catch (const json::exception& e) {
    throw DataError("bad checkpoint manifest " + hdr.string() + ": " + e.what());
  }
  return ck;
}

}  // namespace segis
