#pragma once

// Checkpoint container: "MSCL", u32 version, u32 metadata length, JSON
// metadata (configs, stats, tensor manifest), then the f32 payload.
// Manifest offsets are relative to the start of the payload.

#include "mscl/sampler.hpp"

#include <json.hpp>

#include <filesystem>

namespace mscl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();  // without the manifest
  std::vector<std::pair<std::string, MatF>> tensors;

  const MatF& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// 64-bit FNV-1a.
std::uint64_t fnv1a(const char* data, size_t size);

nlohmann::json to_json(const TokenizerConfig& c);
nlohmann::json to_json(const BackboneConfig& c);
nlohmann::json to_json(const NormalizationStats& s);
TokenizerConfig tokenizer_config_from_json(const nlohmann::json& j);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);
NormalizationStats stats_from_json(const nlohmann::json& j);

// Tokenizer tensors live under "tokenizer/", backbone tensors under "backbone/".
void add_tokenizer(Checkpoint& ckpt, const TokenizerModel& tok);
void add_backbone(Checkpoint& ckpt, const BackboneModel& model);
TokenizerModel tokenizer_from_checkpoint(const Checkpoint& ckpt);
BackboneModel backbone_from_checkpoint(const Checkpoint& ckpt);
ModelBundle bundle_from_checkpoint(const Checkpoint& ckpt);

}  // namespace mscl
