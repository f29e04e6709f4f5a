#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "repkan/data.hpp"
#include "repkan/error.hpp"
#include "repkan/model.hpp"

namespace repkan {

/// Binary layout: magic "RKCKPT1\0", u32 version, u32 header length, JSON header, then every
/// tensor listed in the header as little-endian f32, in header order.
inline constexpr char kCheckpointMagic[8] = {'R', 'K', 'C', 'K', 'P', 'T', '1', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RepKanModel model;
  std::uint64_t seed = 0;
  int epoch = 0;
  BandStats normalization;
  std::vector<std::string> class_names;
  std::vector<std::string> band_names;
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"in_channels", c.in_channels},   {"stage_widths", c.stage_widths}, {"blocks_per_stage", c.blocks_per_stage},
          {"grid_size", c.grid_size},       {"spline_order", c.spline_order}, {"num_classes", c.num_classes},
          {"input_height", c.input_height}, {"input_width", c.input_width},   {"spline_lo", c.spline_lo},
          {"spline_hi", c.spline_hi}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.stage_widths = j.at("stage_widths").get<std::vector<int>>();
  c.blocks_per_stage = j.at("blocks_per_stage").get<std::vector<int>>();
  c.grid_size = j.at("grid_size").get<int>();
  c.spline_order = j.at("spline_order").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.input_height = j.at("input_height").get<int>();
  c.input_width = j.at("input_width").get<int>();
  c.spline_lo = j.at("spline_lo").get<double>();
  c.spline_hi = j.at("spline_hi").get<double>();
  return c;
}

inline std::vector<unsigned char> checkpoint_encode(Checkpoint& ck) {
  RepKanModel& m = ck.model;
  nlohmann::json h;
  h["version"] = kCheckpointVersion;
  h["mode"] = m.deployed() ? "deploy" : "train";
  h["config"] = config_to_json(m.config());
  h["seed"] = ck.seed;
  h["epoch"] = ck.epoch;
  h["normalization"] = {{"mean", ck.normalization.mean}, {"std", ck.normalization.std}};
  h["class_names"] = ck.class_names;
  h["band_names"] = ck.band_names;
  nlohmann::json ready = nlohmann::json::array();
  for (const auto& b : m.batchnorms()) {
    if (b.bn->stats_ready) ready.push_back(b.name);
  }
  h["bn_ready"] = ready;
  nlohmann::json dir = nlohmann::json::array();
  const auto tensors = m.tensors();
  for (const auto& t : tensors) dir.push_back({{"name", t.name}, {"shape", t.tensor->shape()}});
  h["tensors"] = dir;
  const std::string header = h.dump();

  ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.bytes(header.data(), header.size());
  for (const auto& t : tensors) {
    for (double v : t.tensor->data()) w.f32(static_cast<float>(v));
  }
  return w.take();
}

/// Copies stored tensors into `model`, whose tensor names and shapes must match the file's.
inline void fill_model_tensors(RepKanModel& model, const nlohmann::json& dir, ByteReader& r) {
  auto tensors = model.tensors();
  if (dir.size() != tensors.size()) {
    throw FormatError("checkpoint lists " + std::to_string(dir.size()) + " tensors, model has " + std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const std::string name = dir[i].at("name").get<std::string>();
    const Shape shape = dir[i].at("shape").get<Shape>();
    if (name != tensors[i].name) throw FormatError("tensor " + name + " found where " + tensors[i].name + " was expected");
    if (shape != tensors[i].tensor->shape()) {
      throw FormatError("tensor " + name + " has shape " + shape_str(shape) + ", model expects " + shape_str(tensors[i].tensor->shape()));
    }
  }
  for (auto& t : tensors) {
    for (auto& v : t.tensor->data()) v = r.f32(t.name.c_str());
  }
  if (r.remaining() != 0) r.fail(std::to_string(r.remaining()) + " trailing bytes");
}

struct CheckpointHeader {
  nlohmann::json json;
  std::size_t data_offset = 0;
};

inline CheckpointHeader checkpoint_header(ByteReader& r) {
  char magic[sizeof kCheckpointMagic];
  r.bytes(magic, sizeof magic, "magic");
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) ByteReader::fail_at(0, "bad checkpoint magic");
  const std::size_t vat = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    ByteReader::fail_at(vat, "unsupported checkpoint version " + std::to_string(version) + " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t len = r.u32("header length");
  if (r.remaining() < len) r.fail("truncated header");
  CheckpointHeader h;
  const std::size_t at = r.offset();
  std::string text(len, '\0');
  r.bytes(text.data(), len, "header");
  try {
    h.json = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    ByteReader::fail_at(at, std::string("invalid checkpoint header: ") + e.what());
  }
  h.data_offset = r.offset();
  return h;
}

inline Checkpoint checkpoint_decode(std::span<const unsigned char> bytes) {
  ByteReader r(bytes);
  const CheckpointHeader h = checkpoint_header(r);
  try {
    const auto& j = h.json;
    Checkpoint ck;
    const ModelConfig cfg = config_from_json(j.at("config"));
    const std::string mode = j.at("mode").get<std::string>();
    if (mode != "train" && mode != "deploy") throw FormatError("unknown checkpoint mode " + mode);
    ck.model = mode == "deploy" ? RepKanModel::deploy_skeleton(cfg) : RepKanModel(cfg);
    fill_model_tensors(ck.model, j.at("tensors"), r);
    if (mode == "train") {
      const auto ready = j.at("bn_ready").get<std::vector<std::string>>();
      for (auto& b : ck.model.batchnorms()) b.bn->stats_ready = std::find(ready.begin(), ready.end(), b.name) != ready.end();
    }
    ck.seed = j.at("seed").get<std::uint64_t>();
    ck.epoch = j.at("epoch").get<int>();
    ck.normalization.mean = j.at("normalization").at("mean").get<std::vector<double>>();
    ck.normalization.std = j.at("normalization").at("std").get<std::vector<double>>();
    ck.class_names = j.at("class_names").get<std::vector<std::string>>();
    ck.band_names = j.at("band_names").get<std::vector<std::string>>();
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint config: " + e.detail());
  }
}

inline void checkpoint_save(Checkpoint& ck, const std::filesystem::path& path) {
  write_file_bytes(path, checkpoint_encode(ck));
}

inline Checkpoint checkpoint_load(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return checkpoint_decode(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail());
  }
}

/// Loads parameters into an existing model; names and shapes must agree with it.
inline void checkpoint_load_into(RepKanModel& model, const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  const CheckpointHeader h = checkpoint_header(r);
  const bool deploy = h.json.at("mode").get<std::string>() == "deploy";
  if (deploy != model.deployed()) throw FormatError("checkpoint mode differs from target model mode");
  fill_model_tensors(model, h.json.at("tensors"), r);
  if (!deploy) {
    const auto ready = h.json.at("bn_ready").get<std::vector<std::string>>();
    for (auto& b : model.batchnorms()) b.bn->stats_ready = std::find(ready.begin(), ready.end(), b.name) != ready.end();
  }
}

}  // namespace repkan
