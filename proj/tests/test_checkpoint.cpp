#include "mscl/checkpoint.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace mscl;
using nlohmann::json;

namespace {

TokenizerConfig tiny_tokenizer() {
  TokenizerConfig tc;
  tc.motion_dim = 3;
  tc.width = 8;
  tc.heads = 2;
  tc.latent_dim = 4;
  tc.codebook_size = 8;
  tc.scales = {{1, 2, 4, 8}, 4, 32};
  return tc;
}

BackboneConfig tiny_backbone() {
  BackboneConfig bc;
  bc.blocks = 1;
  bc.model_dim = 16;
  bc.heads = 2;
  bc.vocab = 8;
  bc.latent_dim = 4;
  bc.scales = tiny_tokenizer().scales;
  bc.cond_dim = 8;
  return bc;
}

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.metadata["note"] = "x";
  c.tensors.emplace_back("a", MatF::Constant(2, 3, 1.5f));
  c.tensors.emplace_back("b", MatF::Constant(1, 4, -2.0f));
  return c;
}

struct Parts {
  json meta;
  std::string payload;
};

Parts split(const std::string& bytes) {
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 4);
  return {json::parse(bytes.substr(12, len)), bytes.substr(12 + len)};
}

std::string join(const Parts& p) {
  const std::string meta = p.meta.dump();
  std::string out = "MSCL";
  const std::uint32_t version = 1, len = static_cast<std::uint32_t>(meta.size());
  out.append(reinterpret_cast<const char*>(&version), 4);
  out.append(reinterpret_cast<const char*>(&len), 4);
  return out + meta + p.payload;
}

void expect_corruption(const std::string& bytes, const std::string& fragment) {
  try {
    parse_checkpoint(bytes);
    ADD_FAILURE() << "expected a corruption error mentioning '" << fragment << "'";
  } catch (const CorruptionError& e) {
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

}  // namespace

TEST(Fnv, PublishedVectors) {
  EXPECT_EQ(fnv1a("", 0), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a", 1), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a("foobar", 6), 0x85944171f73967e8ULL);
}

TEST(Container, HeaderLayout) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  EXPECT_EQ(bytes.substr(0, 4), "MSCL");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);
  EXPECT_EQ(bytes[5], 0);
  const Parts p = split(bytes);
  ASSERT_EQ(p.meta["manifest"].size(), 2u);
  const auto& a = p.meta["manifest"][0];
  EXPECT_EQ(a["name"], "a");
  EXPECT_EQ(a["dtype"], "f32");
  EXPECT_EQ(a["shape"], json::array({2, 3}));
  EXPECT_EQ(a["length"], 24);
  EXPECT_EQ(p.payload.size(), 40u);
  float first = 0;
  std::memcpy(&first, p.payload.data() + a["offset"].get<size_t>(), 4);
  EXPECT_EQ(first, 1.5f);
}

TEST(Container, RoundTripIsBitwise) {
  Rng rng(1);
  Checkpoint c;
  c.metadata["k"] = {{"nested", 3}};
  for (int i = 0; i < 5; ++i) {
    MatF m(1 + static_cast<Index>(rng.uniform_int(5)), 1 + static_cast<Index>(rng.uniform_int(5)));
    for (Index e = 0; e < m.size(); ++e) m.data()[e] = static_cast<float>(rng.normal());
    c.tensors.emplace_back("t" + std::to_string(i), m);
  }
  c.tensors[0].second(0, 0) = -0.0f;
  const std::string bytes = serialize_checkpoint(c);
  const Checkpoint back = parse_checkpoint(bytes);
  EXPECT_EQ(back.metadata, c.metadata);
  ASSERT_EQ(back.tensors.size(), c.tensors.size());
  for (size_t i = 0; i < c.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].first, c.tensors[i].first);
    const MatF& x = c.tensors[i].second;
    const MatF& y = back.tensors[i].second;
    ASSERT_EQ(x.rows(), y.rows());
    ASSERT_EQ(x.cols(), y.cols());
    EXPECT_EQ(std::memcmp(x.data(), y.data(), static_cast<size_t>(x.size()) * 4), 0);
  }
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST(Container, EmptyModel) {
  Checkpoint c;
  c.tensors.emplace_back("empty", MatF(0, 4));
  const Checkpoint back = parse_checkpoint(serialize_checkpoint(c));
  EXPECT_TRUE(back.has("empty"));
  EXPECT_EQ(back.tensor("empty").size(), 0);
  EXPECT_EQ(parse_checkpoint(serialize_checkpoint(Checkpoint{})).tensors.size(), 0u);
}

TEST(Container, FlippedByteFailsChecksum) {
  std::string bytes = serialize_checkpoint(sample_checkpoint());
  bytes[bytes.size() - 3] ^= 0x10;
  expect_corruption(bytes, "checksum mismatch for tensor b");
}

TEST(Container, Truncation) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  expect_corruption(bytes.substr(0, 7), "header incomplete");
  expect_corruption(bytes.substr(0, 20), "metadata incomplete");
  expect_corruption(bytes.substr(0, bytes.size() - 1), "extends past end of file");
}

TEST(Container, MagicAndVersion) {
  std::string bytes = serialize_checkpoint(sample_checkpoint());
  std::string bad = bytes;
  bad[0] = 'X';
  expect_corruption(bad, "bad magic");
  bad = bytes;
  bad[4] = 2;
  expect_corruption(bad, "unsupported checkpoint version 2");
}

TEST(Container, ManifestFaults) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  {
    Parts p = split(bytes);
    p.meta["manifest"][1]["offset"] = 8;  // inside tensor a
    expect_corruption(join(p), "overlapping manifest entries a and b");
  }
  {
    Parts p = split(bytes);
    p.meta["manifest"][1]["name"] = "a";
    expect_corruption(join(p), "duplicate tensor name a");
  }
  {
    Parts p = split(bytes);
    p.meta["manifest"][0]["shape"] = json::array({3, 3});
    expect_corruption(join(p), "shape does not match");
  }
  {
    Parts p = split(bytes);
    p.meta["manifest"][0]["dtype"] = "f16";
    expect_corruption(join(p), "unsupported dtype");
  }
  {
    Parts p = split(bytes);
    p.meta.erase("manifest");
    expect_corruption(join(p), "no manifest");
  }
  std::string garbage = bytes;
  garbage[12] = '#';
  expect_corruption(garbage, "not valid JSON");
}

TEST(Container, FileRoundTrip) {
  test::TempDir dir("ckpt");
  const Checkpoint c = sample_checkpoint();
  save_checkpoint(c, dir / "m.mscl");
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(dir / "m.mscl")), serialize_checkpoint(c));
  EXPECT_THROW(load_checkpoint(dir / "missing.mscl"), IoError);
}

TEST(Models, TokenizerAndBackboneRoundTrip) {
  TokenizerModel tok = TokenizerModel::create(tiny_tokenizer(), NormalizationStats::identity(3), 3);
  tok.stats.mean = {0.5f, -1.0f, 2.0f};
  tok.stats.std = {1.5f, 0.25f, 3.0f};
  tok.codebook.ema_counts[2] = 7.0f;
  BackboneModel bb = BackboneModel::create(tiny_backbone(), 4);
  Checkpoint c;
  add_tokenizer(c, tok);
  add_backbone(c, bb);
  const std::string bytes = serialize_checkpoint(c);
  const Checkpoint back = parse_checkpoint(bytes);
  const ModelBundle bundle = bundle_from_checkpoint(back);

  EXPECT_EQ(to_json(bundle.tokenizer.config), to_json(tok.config));
  EXPECT_EQ(to_json(bundle.backbone.config), to_json(bb.config));
  EXPECT_EQ(bundle.tokenizer.stats.mean, tok.stats.mean);
  EXPECT_EQ(bundle.tokenizer.stats.std, tok.stats.std);
  EXPECT_EQ(bundle.tokenizer.codebook.entries, tok.codebook.entries);
  EXPECT_EQ(bundle.tokenizer.codebook.ema_counts, tok.codebook.ema_counts);
  ASSERT_EQ(bundle.tokenizer.params.size(), tok.params.size());
  for (ParamId i = 0; i < tok.params.size(); ++i) EXPECT_EQ(bundle.tokenizer.params.value(i), tok.params.value(i));
  ASSERT_EQ(bundle.backbone.params.size(), bb.params.size());
  for (ParamId i = 0; i < bb.params.size(); ++i) EXPECT_EQ(bundle.backbone.params.value(i), bb.params.value(i));

  Checkpoint again;
  again.metadata = back.metadata;
  add_tokenizer(again, bundle.tokenizer);
  add_backbone(again, bundle.backbone);
  EXPECT_EQ(serialize_checkpoint(again), bytes);

  // Same seed, same generation from the reloaded bundle.
  const ModelBundle original{tok, bb};
  Rng r1(5), r2(5);
  const auto sched = RefinementSchedule::parse("1,2,5,10");
  EXPECT_EQ(generate(original, {{1}, false}, GuidanceSpec::paper(), sched, r1).frames,
            generate(bundle, {{1}, false}, GuidanceSpec::paper(), sched, r2).frames);
}

TEST(Models, ShapeMismatchIsCorruption) {
  BackboneModel bb = BackboneModel::create(tiny_backbone(), 4);
  Checkpoint c;
  add_backbone(c, bb);
  for (auto& [name, m] : c.tensors)
    if (name == "backbone/out.bias") m = MatF::Zero(1, 3);
  EXPECT_THROW(backbone_from_checkpoint(c), CorruptionError);
  Checkpoint missing;
  add_backbone(missing, bb);
  missing.tensors.pop_back();
  EXPECT_THROW(backbone_from_checkpoint(missing), CorruptionError);
}

TEST(ConfigJson, RoundTrips) {
  const auto tc = TokenizerConfig{};
  EXPECT_EQ(to_json(tokenizer_config_from_json(to_json(tc))), to_json(tc));
  const auto bc = BackboneConfig::paper();
  EXPECT_EQ(to_json(backbone_config_from_json(to_json(bc))), to_json(bc));
  const NormalizationStats s{{1.0f, 2.0f}, {0.5f, 4.0f}};
  const auto back = stats_from_json(to_json(s));
  EXPECT_EQ(back.mean, s.mean);
  EXPECT_EQ(back.std, s.std);
}
