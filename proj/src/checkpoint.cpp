#include "mscl/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <iomanip>
#include <sstream>

namespace mscl {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'M', 'S', 'C', 'L'};
constexpr size_t kHeader = 12;

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

std::uint32_t get_u32(const std::string& in, size_t at) {
  std::uint32_t v;
  std::memcpy(&v, in.data() + at, 4);
  return v;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

json scales_json(const ScaleConfig& s) {
  return {{"lengths", s.lengths}, {"downsample", s.downsample}, {"t_max", s.t_max}};
}

ScaleConfig scales_from_json(const json& j) {
  ScaleConfig s;
  s.lengths = j.at("lengths").get<std::vector<int>>();
  s.downsample = j.at("downsample").get<int>();
  s.t_max = j.at("t_max").get<int>();
  return s;
}

// Copies checkpoint tensors "<prefix><name>" into a freshly built parameter set.
void load_params(const Checkpoint& ckpt, const std::string& prefix, ParamSet<float>& params) {
  for (ParamId i = 0; i < params.size(); ++i) {
    const std::string name = prefix + params.name(i);
    if (!ckpt.has(name)) throw CorruptionError("checkpoint is missing tensor " + name);
    const MatF& t = ckpt.tensor(name);
    MatF& dst = params.value(i);
    if (t.rows() != dst.rows() || t.cols() != dst.cols())
      throw CorruptionError("tensor " + name + " has the wrong shape for the configured model");
    dst = t;
  }
}

}  // namespace

const MatF& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return m;
  throw CorruptionError("checkpoint has no tensor " + name);
}

bool Checkpoint::has(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& t) { return t.first == name; });
}

std::uint64_t fnv1a(const char* data, size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < size; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  json meta = ckpt.metadata;
  json manifest = json::array();
  std::string payload;
  for (const auto& [name, m] : ckpt.tensors) {
    const size_t len = static_cast<size_t>(m.size()) * sizeof(float);
    const char* data = reinterpret_cast<const char*>(m.data());
    manifest.push_back({{"name", name},
                        {"dtype", "f32"},
                        {"shape", {m.rows(), m.cols()}},
                        {"offset", payload.size()},
                        {"length", len},
                        {"checksum", hex64(fnv1a(data, len))}});
    payload.append(data, len);
  }
  meta["manifest"] = manifest;
  const std::string meta_text = meta.dump();
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(meta_text.size()));
  out += meta_text;
  out += payload;
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < kHeader) throw CorruptionError("checkpoint truncated: header incomplete");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CorruptionError("bad magic: not an MSCL checkpoint");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kCheckpointVersion)
    throw CorruptionError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const size_t meta_len = get_u32(bytes, 8);
  if (kHeader + meta_len > bytes.size()) throw CorruptionError("checkpoint truncated: metadata incomplete");
  json meta;
  try {
    meta = json::parse(bytes.begin() + kHeader, bytes.begin() + static_cast<long>(kHeader + meta_len));
  } catch (const json::exception&) {
    throw CorruptionError("checkpoint metadata is not valid JSON");
  }
  if (!meta.contains("manifest") || !meta["manifest"].is_array()) throw CorruptionError("checkpoint has no manifest");
  const size_t payload_at = kHeader + meta_len;
  const size_t payload_len = bytes.size() - payload_at;

  struct Entry {
    std::string name;
    size_t offset, length;
    Index rows, cols;
    std::string checksum;
  };
  std::vector<Entry> entries;
  try {
    for (const auto& e : meta["manifest"]) {
      Entry x{e.at("name").get<std::string>(),     e.at("offset").get<size_t>(), e.at("length").get<size_t>(),
              e.at("shape").at(0).get<Index>(),    e.at("shape").at(1).get<Index>(),
              e.at("checksum").get<std::string>()};
      if (e.at("dtype").get<std::string>() != "f32") throw CorruptionError("tensor " + x.name + ": unsupported dtype");
      if (x.rows < 0 || x.cols < 0 || static_cast<size_t>(x.rows * x.cols) * sizeof(float) != x.length)
        throw CorruptionError("tensor " + x.name + ": shape does not match byte length");
      entries.push_back(std::move(x));
    }
  } catch (const json::exception&) {
    throw CorruptionError("checkpoint manifest is malformed");
  }

  std::vector<const Entry*> by_offset;
  for (const auto& e : entries) {
    if (e.offset + e.length > payload_len) throw CorruptionError("checkpoint truncated: tensor " + e.name + " extends past end of file");
    by_offset.push_back(&e);
  }
  std::sort(by_offset.begin(), by_offset.end(), [](const Entry* a, const Entry* b) { return a->offset < b->offset; });
  for (size_t i = 1; i < by_offset.size(); ++i)
    if (by_offset[i]->offset < by_offset[i - 1]->offset + by_offset[i - 1]->length)
      throw CorruptionError("overlapping manifest entries " + by_offset[i - 1]->name + " and " + by_offset[i]->name);

  Checkpoint ckpt;
  for (const auto& e : entries) {
    if (ckpt.has(e.name)) throw CorruptionError("duplicate tensor name " + e.name);
    const char* data = bytes.data() + payload_at + e.offset;
    if (hex64(fnv1a(data, e.length)) != e.checksum) throw CorruptionError("checksum mismatch for tensor " + e.name);
    MatF m(e.rows, e.cols);
    if (e.length > 0) std::memcpy(m.data(), data, e.length);
    ckpt.tensors.emplace_back(e.name, std::move(m));
  }
  meta.erase("manifest");
  ckpt.metadata = std::move(meta);
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

// ---------------------------------------------------------------- configs

json to_json(const TokenizerConfig& c) {
  return {{"motion_dim", c.motion_dim},
          {"width", c.width},
          {"latent_dim", c.latent_dim},
          {"heads", c.heads},
          {"codebook_size", c.codebook_size},
          {"scales", scales_json(c.scales)},
          {"ema_decay", c.ema_decay},
          {"dead_code_steps", c.dead_code_steps},
          {"weights",
           {{"reconstruction", c.weights.reconstruction},
            {"feature", c.weights.feature},
            {"commitment", c.weights.commitment}}}};
}

json to_json(const BackboneConfig& c) {
  return {{"blocks", c.blocks},         {"model_dim", c.model_dim},       {"heads", c.heads},
          {"vocab", c.vocab},           {"latent_dim", c.latent_dim},     {"scales", scales_json(c.scales)},
          {"cond_vocab", c.cond_vocab}, {"cond_dim", c.cond_dim},         {"cond_max_len", c.cond_max_len},
          {"rope_base", c.rope_base},     {"absolute_positions", c.absolute_positions}};
}

json to_json(const NormalizationStats& s) { return {{"mean", s.mean}, {"std", s.std}}; }

TokenizerConfig tokenizer_config_from_json(const json& j) {
  TokenizerConfig c;
  c.motion_dim = j.at("motion_dim").get<int>();
  c.width = j.at("width").get<int>();
  c.latent_dim = j.at("latent_dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.codebook_size = j.at("codebook_size").get<int>();
  c.scales = scales_from_json(j.at("scales"));
  c.ema_decay = j.at("ema_decay").get<double>();
  c.dead_code_steps = j.at("dead_code_steps").get<int>();
  const auto& w = j.at("weights");
  c.weights = {w.at("reconstruction").get<double>(), w.at("feature").get<double>(), w.at("commitment").get<double>()};
  return c;
}

BackboneConfig backbone_config_from_json(const json& j) {
  BackboneConfig c;
  c.blocks = j.at("blocks").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.vocab = j.at("vocab").get<int>();
  c.latent_dim = j.at("latent_dim").get<int>();
  c.scales = scales_from_json(j.at("scales"));
  c.cond_vocab = j.at("cond_vocab").get<int>();
  c.cond_dim = j.at("cond_dim").get<int>();
  c.cond_max_len = j.at("cond_max_len").get<int>();
  c.rope_base = j.at("rope_base").get<double>();
  c.absolute_positions = j.value("absolute_positions", false);  // absent in older checkpoints
  return c;
}

NormalizationStats stats_from_json(const json& j) {
  return {j.at("mean").get<std::vector<float>>(), j.at("std").get<std::vector<float>>()};
}

// ---------------------------------------------------------------- models

void add_tokenizer(Checkpoint& ckpt, const TokenizerModel& tok) {
  ckpt.metadata["tokenizer"] = {{"config", to_json(tok.config)},
                                {"stats", to_json(tok.stats)},
                                {"codebook_decay", static_cast<double>(tok.codebook.decay)}};
  for (ParamId i = 0; i < tok.params.size(); ++i)
    ckpt.tensors.emplace_back("tokenizer/" + tok.params.name(i), tok.params.value(i));
  const Index v = tok.codebook.entries.rows();
  MatF counts(1, v), idle(1, v);
  for (Index i = 0; i < v; ++i) {
    counts(0, i) = tok.codebook.ema_counts[static_cast<size_t>(i)];
    idle(0, i) = static_cast<float>(tok.codebook.idle_updates[static_cast<size_t>(i)]);
  }
  ckpt.tensors.emplace_back("tokenizer/codebook.entries", tok.codebook.entries);
  ckpt.tensors.emplace_back("tokenizer/codebook.ema_sums", tok.codebook.ema_sums);
  ckpt.tensors.emplace_back("tokenizer/codebook.ema_counts", counts);
  ckpt.tensors.emplace_back("tokenizer/codebook.idle_updates", idle);
}

void add_backbone(Checkpoint& ckpt, const BackboneModel& model) {
  ckpt.metadata["backbone"] = {{"config", to_json(model.config)}};
  for (ParamId i = 0; i < model.params.size(); ++i)
    ckpt.tensors.emplace_back("backbone/" + model.params.name(i), model.params.value(i));
}

TokenizerModel tokenizer_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.metadata.contains("tokenizer")) throw ValidationError("checkpoint holds no tokenizer");
  const json& meta = ckpt.metadata["tokenizer"];
  TokenizerModel tok;
  try {
    tok = TokenizerModel::create(tokenizer_config_from_json(meta.at("config")), stats_from_json(meta.at("stats")), 0);
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("tokenizer metadata malformed: ") + e.what());
  }
  load_params(ckpt, "tokenizer/", tok.params);
  Codebook<float> cb;
  cb.decay = static_cast<float>(meta.value("codebook_decay", tok.config.ema_decay));
  cb.entries = ckpt.tensor("tokenizer/codebook.entries");
  cb.ema_sums = ckpt.tensor("tokenizer/codebook.ema_sums");
  const MatF& counts = ckpt.tensor("tokenizer/codebook.ema_counts");
  const MatF& idle = ckpt.tensor("tokenizer/codebook.idle_updates");
  if (cb.entries.rows() != tok.config.codebook_size || cb.entries.cols() != tok.config.latent_dim ||
      counts.size() != cb.entries.rows() || idle.size() != cb.entries.rows())
    throw CorruptionError("codebook tensors do not match the tokenizer config");
  for (Index i = 0; i < counts.size(); ++i) {
    cb.ema_counts.push_back(counts.data()[i]);
    cb.idle_updates.push_back(static_cast<int>(idle.data()[i]));
  }
  cb.validate();
  tok.codebook = std::move(cb);
  return tok;
}

BackboneModel backbone_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.metadata.contains("backbone")) throw ValidationError("checkpoint holds no backbone");
  BackboneModel model;
  try {
    model = BackboneModel::create(backbone_config_from_json(ckpt.metadata["backbone"].at("config")), 0);
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("backbone metadata malformed: ") + e.what());
  }
  load_params(ckpt, "backbone/", model.params);
  return model;
}

ModelBundle bundle_from_checkpoint(const Checkpoint& ckpt) {
  return {tokenizer_from_checkpoint(ckpt), backbone_from_checkpoint(ckpt)};
}

}  // namespace mscl
