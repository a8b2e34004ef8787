#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dimerec/model.hpp"

// On-disk model: <dir>/manifest.json describes every tensor; <dir>/tensors.bin
// holds them back to back as little-endian fp32 in manifest order.
namespace dimerec::ckpt {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kPayloadName = "tensors.bin";

struct Checkpoint {
  ModelParams params;
  TrainConfig config;
  diffusion::ScheduleSpec schedule;
  std::string vocab_hash;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

// Tensor group: the DAM MLP stack is one group, every other tensor its own.
inline std::string group_of(const std::string& name) { return name.rfind("dam.", 0) == 0 ? "dam" : name; }

inline json schedule_json(const diffusion::ScheduleSpec& s) {
  return {{"kind", diffusion::to_string(s.kind)}, {"T", s.steps}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

}  // namespace detail

inline json make_manifest(const ModelParams& params, const TrainConfig& config, const std::string& vocab_hash) {
  json tensors = json::array();
  std::size_t offset = 0;
  for (const Parameter* p : params.parameters()) {
    tensors.push_back({{"name", p->name}, {"group", detail::group_of(p->name)}, {"shape", p->value.shape()}, {"offset", offset}});
    offset += p->value.size() * sizeof(float);
  }
  json cfg = json::object();
  for (const auto& [k, v] : to_key_values(config)) cfg[k] = v;
  return {{"format_version", kFormatVersion},
          {"dtype", "float32"},
          {"byte_order", "little"},
          {"item_count", params.item_count()},
          {"tensors", tensors},
          {"payload_bytes", offset},
          {"config", cfg},
          {"schedule", detail::schedule_json(config.schedule_spec())},
          {"vocab_hash", vocab_hash}};
}

inline void save_checkpoint(const fs::path& dir, const ModelParams& params, const TrainConfig& config,
                            const std::string& vocab_hash) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / kPayloadName, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + (dir / kPayloadName).string());
    for (const Parameter* p : params.parameters()) {
      for (double v : p->value.values()) {
        const std::uint32_t bits = detail::to_little(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
      }
    }
    if (!out) throw CheckpointError("write failed: " + (dir / kPayloadName).string());
  }
  std::ofstream out(dir / kManifestName);
  if (!out) throw CheckpointError("cannot write " + (dir / kManifestName).string());
  out << make_manifest(params, config, vocab_hash).dump(2) << '\n';
}

inline json read_manifest(const fs::path& dir) {
  std::ifstream in(dir / kManifestName);
  if (!in) throw CheckpointError("missing manifest: " + (dir / kManifestName).string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw CheckpointError("corrupt manifest " + (dir / kManifestName).string() + ": " + e.what());
  }
}

// Loads and validates a checkpoint. If `expected_vocab_hash` is non-empty and
// differs from the stored one a warning is recorded (callers decide whether
// that is fatal).
inline Checkpoint load_checkpoint(const fs::path& dir, const std::string& expected_vocab_hash = {}) {
  const json manifest = read_manifest(dir);

  Checkpoint ck;
  std::vector<std::pair<std::string, Shape>> entries;
  std::size_t item_count = 0;
  try {
    if (manifest.at("format_version").get<int>() != kFormatVersion) {
      throw CheckpointError("unsupported checkpoint format_version " + manifest.at("format_version").dump());
    }
    if (manifest.at("dtype").get<std::string>() != "float32") {
      throw CheckpointError("unsupported dtype " + manifest.at("dtype").dump());
    }
    KeyValues kv;
    for (const auto& [k, v] : manifest.at("config").items()) kv[k] = v.get<std::string>();
    ck.config = config_from_key_values(kv);
    const json& s = manifest.at("schedule");
    ck.schedule = {diffusion::schedule_kind_from_string(s.at("kind").get<std::string>()), s.at("T").get<int>(),
                   s.at("beta_start").get<double>(), s.at("beta_end").get<double>()};
    ck.vocab_hash = manifest.at("vocab_hash").get<std::string>();
    item_count = manifest.at("item_count").get<std::size_t>();
    for (const json& t : manifest.at("tensors")) {
      entries.emplace_back(t.at("name").get<std::string>(), t.at("shape").get<Shape>());
    }
  } catch (const json::exception& e) {
    throw CheckpointError("corrupt manifest " + (dir / kManifestName).string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("corrupt manifest config: ") + e.what());
  }

  // Rebuild the expected layout from the config and check it against the manifest.
  Rng rng(0);
  ck.params = init_model(ck.config, item_count, rng);
  const auto params = ck.params.parameters();
  if (entries.size() != params.size()) {
    throw CheckpointError("manifest lists " + std::to_string(entries.size()) + " tensors, config implies " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (entries[i].first != params[i]->name) {
      throw CheckpointError("tensor " + std::to_string(i) + ": expected '" + params[i]->name + "', found '" +
                            entries[i].first + "'");
    }
    if (entries[i].second != params[i]->value.shape()) {
      throw CheckpointError("shape mismatch for tensor '" + entries[i].first + "': manifest " +
                            shape_string(entries[i].second) + ", config implies " +
                            shape_string(params[i]->value.shape()));
    }
  }

  std::ifstream in(dir / kPayloadName, std::ios::binary);
  if (!in) throw CheckpointError("missing payload: " + (dir / kPayloadName).string());
  for (Parameter* p : params) {
    std::vector<std::uint32_t> buf(p->value.size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(std::uint32_t)));
    if (static_cast<std::size_t>(in.gcount()) != buf.size() * sizeof(std::uint32_t)) {
      throw CheckpointError("truncated payload: tensor '" + p->name + "' needs " +
                            std::to_string(buf.size() * sizeof(float)) + " bytes, got " +
                            std::to_string(in.gcount()));
    }
    for (std::size_t i = 0; i < buf.size(); ++i) {
      p->value[i] = static_cast<double>(std::bit_cast<float>(detail::to_little(buf[i])));
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw CheckpointError("payload has trailing bytes after tensor '" + params.back()->name + "'");
  }
  if (!expected_vocab_hash.empty() && expected_vocab_hash != ck.vocab_hash) {
    ck.warnings.push_back("vocabulary hash mismatch: checkpoint " + ck.vocab_hash + ", dataset " + expected_vocab_hash);
  }
  return ck;
}

// Distinct tensor groups listed by a manifest, in order.
inline std::vector<std::string> manifest_groups(const json& manifest) {
  std::vector<std::string> groups;
  for (const json& t : manifest.at("tensors")) {
    const auto g = t.at("group").get<std::string>();
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
  }
  return groups;
}

// Rounds every parameter to fp32, i.e. the values a save/load round trip yields.
inline void round_to_fp32(ModelParams& params) {
  for (Parameter* p : params.parameters()) {
    for (double& v : p->value.values()) v = static_cast<double>(static_cast<float>(v));
  }
}

}  // namespace dimerec::ckpt
