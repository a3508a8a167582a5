#include "mscl/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <sstream>

namespace mscl {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

RunConfig RunConfig::desk() {
  RunConfig c;
  c.sync();
  return c;
}

RunConfig RunConfig::paper() {
  RunConfig c;
  c.preset = "paper";
  c.corpus.t_max = 196;
  c.tokenizer.codebook_size = 512;
  c.tokenizer.latent_dim = 512;
  c.tokenizer.scales = ScaleConfig::paper();
  c.backbone = BackboneConfig::paper();
  c.backbone_train.epochs = 120;
  c.backbone_train.adam.lr = 3e-4;
  c.backbone_train.gamma_max = 0.6;
  c.guidance = GuidanceSpec::paper();
  c.schedule.iterations = {1, 2, 5, 10};
  c.sync();
  return c;
}

RunConfig RunConfig::preset_named(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper" || name == "paper-scale") return paper();
  throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
}

namespace {

json adam_json(const AdamConfig& a) {
  return {{"lr", a.lr},
          {"beta1", a.beta1},
          {"beta2", a.beta2},
          {"eps", a.eps},
          {"warmup_steps", a.warmup_steps},
          {"clip_norm", a.clip_norm}};
}

AdamConfig adam_from(const json& j) {
  AdamConfig a;
  a.lr = j.at("lr").get<double>();
  a.beta1 = j.at("beta1").get<double>();
  a.beta2 = j.at("beta2").get<double>();
  a.eps = j.at("eps").get<double>();
  a.warmup_steps = j.at("warmup_steps").get<int>();
  a.clip_norm = j.at("clip_norm").get<double>();
  return a;
}

void check_keys(const json& doc, const json& schema, const std::string& path) {
  if (!doc.is_object()) throw ConfigError("config " + (path.empty() ? std::string("document") : "'" + path + "'") +
                                          " must be an object");
  for (const auto& [key, value] : doc.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!schema.contains(key)) throw ConfigError("unknown config key '" + where + "'");
    if (value.is_null()) throw ConfigError("config key '" + where + "' is null");
    if (schema[key].is_object()) check_keys(value, schema[key], where);
  }
}

}  // namespace

json RunConfig::to_json() const {
  const auto& g = corpus.grammar;
  const auto& w = tokenizer.weights;
  return {
      {"preset", preset},
      {"seed", seed},
      {"checkpoint", checkpoint},
      {"corpus",
       {{"size", corpus.size},
        {"t_max", corpus.t_max},
        {"channels", corpus.channels},
        {"cycle_len", corpus.cycle_len},
        {"noise_std", corpus.noise_std},
        {"fps", corpus.fps},
        {"num_motifs", g.num_motifs},
        {"max_reps", g.max_reps},
        {"max_segments", g.max_segments}}},
      {"tokenizer",
       {{"width", tokenizer.width},
        {"latent_dim", tokenizer.latent_dim},
        {"heads", tokenizer.heads},
        {"codebook_size", tokenizer.codebook_size},
        {"scale_lengths", tokenizer.scales.lengths},
        {"downsample", tokenizer.scales.downsample},
        {"ema_decay", tokenizer.ema_decay},
        {"dead_code_steps", tokenizer.dead_code_steps},
        {"loss_weights", {{"reconstruction", w.reconstruction}, {"feature", w.feature}, {"commitment", w.commitment}}},
        {"epochs", tokenizer_train.epochs},
        {"batch", tokenizer_train.batch},
        {"adam", adam_json(tokenizer_train.adam)}}},
      {"backbone",
       {{"blocks", backbone.blocks},
        {"model_dim", backbone.model_dim},
        {"heads", backbone.heads},
        {"cond_dim", backbone.cond_dim},
        {"rope_base", backbone.rope_base},
        {"absolute_positions", backbone.absolute_positions},
        {"epochs", backbone_train.epochs},
        {"batch", backbone_train.batch},
        {"adam", adam_json(backbone_train.adam)},
        {"gamma_max", backbone_train.gamma_max},
        {"pure_ar_prob", backbone_train.mask_policy.pure_ar_prob},
        {"guidance_drop", backbone_train.guidance_drop}}},
      {"sampler",
       {{"guidance", guidance.scale},
        {"temperature", guidance.temperature},
        {"top_k", guidance.top_k},
        {"schedule", schedule.iterations}}},
  };
}

RunConfig RunConfig::from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config document must be an object");
  std::string name = "desk";
  if (doc.contains("preset")) {
    if (!doc["preset"].is_string()) throw ConfigError("config key 'preset' must be a string");
    name = doc["preset"].get<std::string>();
  }
  RunConfig c = preset_named(name);
  json merged = c.to_json();
  check_keys(doc, merged, "");
  merged.merge_patch(doc);
  try {
    c.seed = merged.at("seed").get<std::uint64_t>();
    c.checkpoint = merged.at("checkpoint").get<std::string>();
    const auto& co = merged.at("corpus");
    c.corpus.size = co.at("size").get<int>();
    c.corpus.t_max = co.at("t_max").get<int>();
    c.corpus.channels = co.at("channels").get<int>();
    c.corpus.cycle_len = co.at("cycle_len").get<int>();
    c.corpus.noise_std = co.at("noise_std").get<double>();
    c.corpus.fps = co.at("fps").get<double>();
    c.corpus.grammar = {co.at("num_motifs").get<int>(), co.at("max_reps").get<int>(),
                        co.at("max_segments").get<int>()};
    const auto& t = merged.at("tokenizer");
    c.tokenizer.width = t.at("width").get<int>();
    c.tokenizer.latent_dim = t.at("latent_dim").get<int>();
    c.tokenizer.heads = t.at("heads").get<int>();
    c.tokenizer.codebook_size = t.at("codebook_size").get<int>();
    c.tokenizer.scales.lengths = t.at("scale_lengths").get<std::vector<int>>();
    c.tokenizer.scales.downsample = t.at("downsample").get<int>();
    c.tokenizer.ema_decay = t.at("ema_decay").get<double>();
    c.tokenizer.dead_code_steps = t.at("dead_code_steps").get<int>();
    const auto& w = t.at("loss_weights");
    c.tokenizer.weights = {w.at("reconstruction").get<double>(), w.at("feature").get<double>(),
                           w.at("commitment").get<double>()};
    c.tokenizer_train.epochs = t.at("epochs").get<int>();
    c.tokenizer_train.batch = t.at("batch").get<int>();
    c.tokenizer_train.adam = adam_from(t.at("adam"));
    const auto& b = merged.at("backbone");
    c.backbone.blocks = b.at("blocks").get<int>();
    c.backbone.model_dim = b.at("model_dim").get<int>();
    c.backbone.heads = b.at("heads").get<int>();
    c.backbone.cond_dim = b.at("cond_dim").get<int>();
    c.backbone.rope_base = b.at("rope_base").get<double>();
    c.backbone.absolute_positions = b.at("absolute_positions").get<bool>();
    c.backbone_train.epochs = b.at("epochs").get<int>();
    c.backbone_train.batch = b.at("batch").get<int>();
    c.backbone_train.adam = adam_from(b.at("adam"));
    c.backbone_train.gamma_max = b.at("gamma_max").get<double>();
    c.backbone_train.mask_policy.pure_ar_prob = b.at("pure_ar_prob").get<double>();
    c.backbone_train.guidance_drop = b.at("guidance_drop").get<double>();
    const auto& s = merged.at("sampler");
    c.guidance.scale = s.at("guidance").get<double>();
    c.guidance.temperature = s.at("temperature").get<double>();
    c.guidance.top_k = s.at("top_k").get<int>();
    c.schedule.iterations = s.at("schedule").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config type error: ") + e.what());
  }
  c.sync();
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception&) {
    throw ConfigError(path.string() + ": not valid JSON");
  }
  return from_json(doc);
}

void RunConfig::sync() {
  tokenizer.motion_dim = corpus.channels;
  tokenizer.scales.t_max = corpus.t_max;
  tokenizer_train.seed = seed;
  backbone.vocab = tokenizer.codebook_size;
  backbone.latent_dim = tokenizer.latent_dim;
  backbone.scales = tokenizer.scales;
  backbone.cond_vocab = corpus.grammar.vocab_size();
  backbone.cond_max_len = corpus.grammar.max_encoding_length();
  backbone_train.seed = seed;
}

void RunConfig::validate() const {
  corpus.validate();
  tokenizer.validate();
  backbone.validate();
  guidance.validate();
  schedule.validate(tokenizer.scales.num_scales());
  if (tokenizer_train.epochs < 0 || backbone_train.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (tokenizer_train.batch < 1 || backbone_train.batch < 1) throw ConfigError("batch must be >= 1");
  auto unit = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
  };
  unit(backbone_train.gamma_max, "gamma_max");
  unit(backbone_train.mask_policy.pure_ar_prob, "pure_ar_prob");
  unit(backbone_train.guidance_drop, "guidance_drop");
  for (const AdamConfig* a : {&tokenizer_train.adam, &backbone_train.adam})
    if (!(a->lr > 0) || a->warmup_steps < 0) throw ConfigError("optimizer needs lr > 0 and warmup_steps >= 0");
}

// ---------------------------------------------------------------- metrics

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> ratio(int num, int den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / den;
}

}  // namespace

json ProxyMetrics::to_json() const {
  return {{"oracle_exact_match_rate", opt(oracle_exact_match_rate)},
          {"oracle_repetition_accuracy", opt(oracle_repetition_accuracy)},
          {"proxy_diversity", opt(proxy_diversity)},
          {"proxy_mmodality", opt(proxy_mmodality)},
          {"reconstruction_mse", opt(reconstruction_mse)},
          {"reference_exact_match_rate", opt(reference_exact_match_rate)},
          {"reference_repetition_accuracy", opt(reference_repetition_accuracy)}};
}

OracleScore oracle_score(const MotionSet& set, const MotifLibrary& library) {
  OracleScore s;
  for (size_t i = 0; i < set.motions.size(); ++i) {
    if (i >= set.conditions.size() || !set.conditions[i]) continue;
    const OracleResult r = oracle_decode(set.motions[i], library);
    ++s.evaluated;
    if (r.program == *set.conditions[i]) ++s.exact;
    if (r.program.total_reps() == set.conditions[i]->total_reps()) ++s.reps;
  }
  return s;
}

ProxyMetrics compute_proxy_metrics(const MotionSet& generated, const MotionSet& reference,
                                   const MotifLibrary& library, const NormalizationStats& stats) {
  if (generated.motions.empty() || reference.motions.empty()) throw ValidationError("metric sets must be non-empty");
  ProxyMetrics m;
  const OracleScore g = oracle_score(generated, library);
  m.oracle_exact_match_rate = ratio(g.exact, g.evaluated);
  m.oracle_repetition_accuracy = ratio(g.reps, g.evaluated);
  const OracleScore r = oracle_score(reference, library);
  m.reference_exact_match_rate = ratio(r.exact, r.evaluated);
  m.reference_repetition_accuracy = ratio(r.reps, r.evaluated);

  std::vector<MatF> norm;
  for (const auto& x : generated.motions) norm.push_back(model_frames(x, stats));
  auto dist = [&](size_t a, size_t b) {
    if (norm[a].rows() != norm[b].rows() || norm[a].cols() != norm[b].cols())
      throw ShapeError("diversity needs motions of equal shape");
    return static_cast<double>((norm[a] - norm[b]).cast<double>().norm());
  };
  double sum = 0;
  long pairs = 0;
  for (size_t a = 0; a < norm.size(); ++a)
    for (size_t b = a + 1; b < norm.size(); ++b, ++pairs) sum += dist(a, b);
  if (pairs > 0) m.proxy_diversity = sum / static_cast<double>(pairs);

  std::map<std::string, std::vector<size_t>> groups;
  for (size_t i = 0; i < norm.size(); ++i) {
    const bool has = i < generated.conditions.size() && generated.conditions[i];
    groups[has ? generated.conditions[i]->to_string() : std::string("null")].push_back(i);
  }
  double group_sum = 0;
  int group_count = 0;
  for (const auto& [key, idx] : groups) {
    if (idx.size() < 2) continue;
    double s = 0;
    long n = 0;
    for (size_t a = 0; a < idx.size(); ++a)
      for (size_t b = a + 1; b < idx.size(); ++b, ++n) s += dist(idx[a], idx[b]);
    group_sum += s / static_cast<double>(n);
    ++group_count;
  }
  if (group_count > 0) m.proxy_mmodality = group_sum / group_count;

  if (generated.motions.size() == reference.motions.size()) {
    double se = 0;
    double count = 0;
    bool aligned = true;
    for (size_t i = 0; i < norm.size() && aligned; ++i) {
      const MatF ref = model_frames(reference.motions[i], stats);
      if (ref.rows() != norm[i].rows() || ref.cols() != norm[i].cols()) {
        aligned = false;
        break;
      }
      se += (ref - norm[i]).cast<double>().squaredNorm();
      count += static_cast<double>(ref.size());
    }
    if (aligned && count > 0) m.reconstruction_mse = se / count;
  }
  return m;
}

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string metrics_jsonl_to_csv(const std::string& jsonl) {
  std::istringstream in(jsonl);
  std::string line;
  std::vector<json> rows;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception&) {
      throw ValidationError("metrics line is not JSON: " + line.substr(0, 60));
    }
  }
  if (rows.empty()) throw ValidationError("metrics file has no records");
  std::string out;
  try {
    if (rows.front().contains("val_recon_mse")) {
      out = "epoch,train_loss,val_recon_mse,codes_used,reseeded,lr\n";
      for (const auto& r : rows)
        out += std::to_string(r.at("epoch").get<int>()) + "," + num(r.at("train_loss").get<double>()) + "," +
               num(r.at("val_recon_mse").get<double>()) + "," + std::to_string(r.at("codes_used").get<int>()) + "," +
               std::to_string(r.at("reseeded").get<int>()) + "," + num(r.at("lr").get<double>()) + "\n";
      return out;
    }
    const size_t k = rows.front().at("per_scale_loss").size();
    out = "epoch,train_loss,val_loss,masked_acc,lr";
    for (size_t i = 0; i < k; ++i) out += ",per_scale_loss_" + std::to_string(i);
    out += "\n";
    for (const auto& r : rows) {
      const auto per = r.at("per_scale_loss").get<std::vector<double>>();
      if (per.size() != k) throw ValidationError("metrics records disagree on the number of scales");
      out += std::to_string(r.at("epoch").get<int>()) + "," + num(r.at("train_loss").get<double>()) + "," +
             num(r.at("val_loss").get<double>()) + "," + num(r.at("masked_acc").get<double>()) + "," +
             num(r.at("lr").get<double>());
      for (double v : per) out += "," + num(v);
      out += "\n";
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("metrics record malformed: ") + e.what());
  }
  return out;
}

// ---------------------------------------------------------------- commands

namespace {

json epoch_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch},     {"train_loss", m.train_loss}, {"val_loss", m.val_loss},
          {"masked_acc", m.masked_acc}, {"lr", m.lr},          {"per_scale_loss", m.per_scale_loss}};
}

json epoch_json(const TokenizerEpochMetrics& m) {
  return {{"epoch", m.epoch},         {"train_loss", m.train_loss}, {"val_recon_mse", m.val_recon_mse},
          {"codes_used", m.codes_used}, {"reseeded", m.reseeded},   {"lr", m.lr}};
}

json hierarchy_json(const ScaleTokenHierarchy& h) { return h.tokens; }

json mask_json(const std::vector<std::vector<std::uint8_t>>& mask) {
  json out = json::array();
  for (const auto& m : mask) out.push_back(std::vector<int>(m.begin(), m.end()));
  return out;
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

RunConfig resolve_config(const Common& c, const json* fallback = nullptr) {
  RunConfig cfg;
  if (!c.config.empty())
    cfg = RunConfig::load(c.config);
  else if (fallback)
    cfg = RunConfig::from_json(*fallback);
  else
    cfg = RunConfig::desk();
  if (c.seed) cfg.seed = *c.seed;
  cfg.sync();
  cfg.validate();
  return cfg;
}

void require_matching_corpus(const RunConfig& cfg, const Corpus& c) {
  if (c.spec.t_max != cfg.corpus.t_max || c.spec.channels != cfg.corpus.channels ||
      c.spec.grammar.vocab_size() != cfg.corpus.grammar.vocab_size() ||
      c.spec.grammar.max_segments != cfg.corpus.grammar.max_segments)
    throw ConfigError("corpus shape or grammar differs from the run config");
}

// Architecture comes from the checkpoint; everything else from the config.
RunConfig adopt_bundle(RunConfig cfg, const ModelBundle& bundle) {
  cfg.tokenizer = bundle.tokenizer.config;
  cfg.corpus.t_max = cfg.tokenizer.scales.t_max;
  cfg.corpus.channels = cfg.tokenizer.motion_dim;
  const BackboneConfig arch = bundle.backbone.config;
  cfg.sync();
  if (arch.cond_vocab != cfg.backbone.cond_vocab || arch.cond_max_len != cfg.backbone.cond_max_len)
    throw ConfigError("condition grammar differs from the one the checkpoint was trained with");
  cfg.backbone = arch;
  return cfg;
}

ConditionSequence condition_sequence(const std::optional<ConditionProgram>& p, const Grammar& grammar) {
  if (!p) return {{}, true};
  return {p->encode(grammar), false};
}

std::optional<ConditionProgram> parse_condition(const std::string& text, const Grammar& grammar) {
  if (text.empty() || text == "null") return std::nullopt;
  return ConditionProgram::parse(text, grammar);
}

void emit(std::ostream& out, const json& j) { out << j.dump() << "\n" << std::flush; }

NormalizationStats eval_stats(const fs::path& gen, const fs::path& ref, int channels) {
  for (const auto& p : {ref / "meta.json", gen / "stats.json", ref / "stats.json"}) {
    if (!fs::exists(p)) continue;
    const json j = json::parse(read_file(p));
    if (j.contains("stats")) return stats_from_json(j["stats"]);
    return stats_from_json(j);
  }
  return NormalizationStats::identity(channels);
}

}  // namespace

int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Next-scale motion token generation on a synthetic corpus", "mscl"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "run config JSON")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "seed override");
  };

  // gen-data
  std::string out_path;
  std::optional<int> size;
  auto* gen_data = app.add_subcommand("gen-data", "render a synthetic corpus");
  add_common(gen_data);
  gen_data->add_option("--out", out_path, "output directory")->required();
  gen_data->add_option("--size", size, "number of samples");

  // train-tokenizer / train-ar
  std::string data_path, tokenizer_path, metrics_path;
  std::optional<int> epochs;
  auto* train_tok = app.add_subcommand("train-tokenizer", "train the residual tokenizer");
  add_common(train_tok);
  train_tok->add_option("--data", data_path, "corpus directory")->required()->check(CLI::ExistingDirectory);
  train_tok->add_option("--out", out_path, "checkpoint path")->required();
  train_tok->add_option("--epochs", epochs, "epoch override");
  train_tok->add_option("--metrics", metrics_path, "metrics JSONL (default <out>.metrics.jsonl)");

  auto* train_ar = app.add_subcommand("train-ar", "train the next-scale backbone");
  add_common(train_ar);
  train_ar->add_option("--data", data_path, "corpus directory")->required()->check(CLI::ExistingDirectory);
  train_ar->add_option("--tokenizer", tokenizer_path, "tokenizer checkpoint")->required()->check(CLI::ExistingFile);
  train_ar->add_option("--out", out_path, "checkpoint path")->required();
  train_ar->add_option("--epochs", epochs, "epoch override");
  train_ar->add_option("--metrics", metrics_path, "metrics JSONL (default <out>.metrics.jsonl)");

  // generate / edit
  std::string checkpoint_path, cond_text, steps_text;
  bool cond_given = false;
  std::optional<double> guidance_scale, temperature;
  std::optional<int> top_k;
  int count = 1;
  bool no_cache = false;
  auto add_sampling = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", checkpoint_path, "model checkpoint")->check(CLI::ExistingFile);
    sub->add_option("--cond", cond_text, "condition program, e.g. m0x2,m3x1, or null");
    sub->add_option("--steps", steps_text, "refinement iterations per scale, e.g. 1,2,5,10");
    sub->add_option("--guidance", guidance_scale, "guidance scale");
    sub->add_option("--temperature", temperature, "sampling temperature");
    sub->add_option("--top-k", top_k, "top-k truncation, 0 = off");
    sub->add_flag("--no-cache", no_cache, "recompute prefix scales instead of caching keys/values");
    sub->add_option("--out", out_path, "output directory")->required();
  };
  auto* gen = app.add_subcommand("generate", "sample motions for a condition");
  add_common(gen);
  add_sampling(gen);
  gen->add_option("--count", count, "number of samples")->check(CLI::PositiveNumber);

  std::string source_path, mode_text = "edit";
  std::vector<std::string> edits;
  int index = 0;
  auto* ed = app.add_subcommand("edit", "re-generate frame intervals of a source motion");
  add_common(ed);
  add_sampling(ed);
  ed->add_option("--source", source_path, "motion set directory")->required()->check(CLI::ExistingDirectory);
  ed->add_option("--index", index, "motion index within the source set")->check(CLI::NonNegativeNumber);
  ed->add_option("--edit", edits, "frame interval a:b (repeatable)")->required();
  ed->add_option("--mode", mode_text, "inpaint | outpaint | continuation | edit");

  // eval / export-metrics
  std::string gen_dir, ref_dir;
  auto* ev = app.add_subcommand("eval", "oracle and proxy metrics of a generated set");
  add_common(ev);
  ev->add_option("--gen", gen_dir, "generated motion set")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--ref", ref_dir, "reference motion set")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--out", out_path, "metrics JSON file");

  auto* ex = app.add_subcommand("export-metrics", "training metrics JSONL to CSV");
  ex->add_option("--metrics", metrics_path, "metrics JSONL")->required()->check(CLI::ExistingFile);
  ex->add_option("--out", out_path, "CSV path (stdout when absent)");

  auto fail = [&](const char* kind, const std::string& message, int code) {
    err << json{{"error", kind}, {"message", message}}.dump() << "\n";
    return code;
  };

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }
  cond_given = gen->count("--cond") + ed->count("--cond") > 0;

  try {
    if (gen_data->parsed()) {
      RunConfig cfg = resolve_config(common);
      if (size) cfg.corpus.size = *size;
      cfg.validate();
      const Corpus c = build_corpus(cfg.corpus, cfg.seed);
      write_corpus(c, out_path);
      emit(out, {{"event", "gen-data"}, {"out", out_path}, {"size", c.motions.size()}, {"seed", cfg.seed},
                 {"train", c.train.size()}, {"val", c.val.size()}, {"test", c.test.size()}});
      return 0;
    }

    if (train_tok->parsed()) {
      RunConfig cfg = resolve_config(common);
      if (epochs) cfg.tokenizer_train.epochs = *epochs;
      cfg.validate();
      const Corpus c = read_corpus(data_path);
      require_matching_corpus(cfg, c);
      TokenizerModel tok = TokenizerModel::create(cfg.tokenizer, c.stats, cfg.seed);
      std::vector<MatF> train, val;
      for (int i : c.train) train.push_back(model_frames(c.motions[static_cast<size_t>(i)], c.stats));
      for (int i : c.val) val.push_back(model_frames(c.motions[static_cast<size_t>(i)], c.stats));
      std::string log;
      train_tokenizer(tok, train, val, cfg.tokenizer_train, [&](const TokenizerEpochMetrics& m) {
        const json j = epoch_json(m);
        log += j.dump() + "\n";
        emit(out, j);
      });
      Checkpoint ckpt;
      ckpt.metadata["run_config"] = cfg.to_json();
      add_tokenizer(ckpt, tok);
      save_checkpoint(ckpt, out_path);
      write_file_atomic(metrics_path.empty() ? out_path + ".metrics.jsonl" : metrics_path, log);
      return 0;
    }

    if (train_ar->parsed()) {
      RunConfig cfg = resolve_config(common);
      if (epochs) cfg.backbone_train.epochs = *epochs;
      const TokenizerModel tok = tokenizer_from_checkpoint(load_checkpoint(tokenizer_path));
      cfg.tokenizer = tok.config;
      cfg.sync();
      cfg.validate();
      const Corpus c = read_corpus(data_path);
      require_matching_corpus(cfg, c);
      auto subset = [&](const std::vector<int>& idx) {
        std::vector<MotionSequence> m;
        std::vector<ConditionProgram> p;
        for (int i : idx) {
          m.push_back(c.motions[static_cast<size_t>(i)]);
          p.push_back(c.programs[static_cast<size_t>(i)]);
        }
        return prepare_train_data(tok, m, p, cfg.corpus.grammar);
      };
      const TrainData train = subset(c.train), val = subset(c.val);
      BackboneModel model = BackboneModel::create(cfg.backbone, cfg.seed);
      std::string log;
      const TrainResult result =
          train_backbone(model, tok.codebook.entries, train, val, cfg.backbone_train, [&](const EpochMetrics& m) {
            const json j = epoch_json(m);
            log += j.dump() + "\n";
            emit(out, j);
          });
      Checkpoint ckpt;
      ckpt.metadata["run_config"] = cfg.to_json();
      ckpt.metadata["training"] = {{"best_epoch", result.best_epoch}, {"diverged", result.diverged}};
      add_tokenizer(ckpt, tok);
      add_backbone(ckpt, model);
      save_checkpoint(ckpt, out_path);
      write_file_atomic(metrics_path.empty() ? out_path + ".metrics.jsonl" : metrics_path, log);
      if (result.diverged)
        return fail("numeric", "training diverged; saved the best parameters from epoch " +
                                   std::to_string(result.best_epoch), 1);
      return 0;
    }

    if (gen->parsed() || ed->parsed()) {
      Common probe = common;
      std::string ckpt_file = checkpoint_path;
      if (ckpt_file.empty() && !common.config.empty()) ckpt_file = RunConfig::load(common.config).checkpoint;
      if (ckpt_file.empty()) return fail("usage", "no checkpoint given (--checkpoint or config key 'checkpoint')", 2);
      if (!fs::exists(ckpt_file)) return fail("usage", "checkpoint not found: " + ckpt_file, 2);
      const Checkpoint ckpt = load_checkpoint(ckpt_file);
      const ModelBundle bundle = bundle_from_checkpoint(ckpt);
      const json* stored = ckpt.metadata.contains("run_config") ? &ckpt.metadata["run_config"] : nullptr;
      RunConfig cfg = adopt_bundle(resolve_config(probe, stored), bundle);
      if (!steps_text.empty()) cfg.schedule = RefinementSchedule::parse(steps_text);
      if (guidance_scale) cfg.guidance.scale = *guidance_scale;
      if (temperature) cfg.guidance.temperature = *temperature;
      if (top_k) cfg.guidance.top_k = *top_k;
      cfg.validate();
      const Grammar& grammar = cfg.corpus.grammar;
      const GenerateOptions options{!no_cache};
      json sidecar = {{"seed", cfg.seed},
                      {"checkpoint", ckpt_file},
                      {"schedule", cfg.schedule.iterations},
                      {"guidance",
                       {{"scale", cfg.guidance.scale},
                        {"temperature", cfg.guidance.temperature},
                        {"top_k", cfg.guidance.top_k}}},
                      {"config", cfg.to_json()}};
      const Rng base(cfg.seed);
      MotionSet set;

      if (gen->parsed()) {
        const auto program = parse_condition(cond_text, grammar);
        const ConditionSequence cond = condition_sequence(program, grammar);
        sidecar["condition"] = program ? json(program->to_string()) : json(nullptr);
        json samples = json::array();
        int steps = 0, forwards = 0;
        for (int i = 0; i < count; ++i) {
          Rng rng = base.substream(static_cast<std::uint64_t>(i));
          GenerationResult r = generate(bundle, cond, cfg.guidance, cfg.schedule, rng, options);
          steps += r.steps;
          forwards += r.forwards;
          samples.push_back({{"index", i}, {"steps", r.steps}, {"token_hierarchy", hierarchy_json(r.hierarchy)}});
          set.motions.push_back(std::move(r.motion));
          set.conditions.push_back(program);
        }
        sidecar["samples"] = samples;
        write_motion_set(set, out_path);
        write_file_atomic(fs::path(out_path) / "sidecar.json", sidecar.dump(1) + "\n");
        write_file_atomic(fs::path(out_path) / "stats.json", to_json(bundle.tokenizer.stats).dump() + "\n");
        emit(out, {{"event", "generate"}, {"count", count}, {"steps", steps / count}, {"forwards", forwards},
                   {"out", out_path}});
        return 0;
      }

      const MotionSet source = read_motion_set(source_path, grammar);
      if (index >= static_cast<int>(source.motions.size()))
        return fail("usage", "--index " + std::to_string(index) + " out of range for " + source_path, 2);
      EditRequest req;
      req.source = source.motions[static_cast<size_t>(index)];
      for (const auto& e : edits) req.intervals.push_back(FrameInterval::parse(e));
      std::optional<ConditionProgram> program =
          cond_given ? parse_condition(cond_text, grammar) : source.conditions[static_cast<size_t>(index)];
      req.condition = condition_sequence(program, grammar);
      req.mode = parse_edit_mode(mode_text);
      req.guidance = cfg.guidance;
      req.schedule = cfg.schedule;
      Rng rng = base.substream(0);
      EditResult r = edit(bundle, req, rng, options);
      sidecar["condition"] = program ? json(program->to_string()) : json(nullptr);
      sidecar["source"] = {{"path", source_path}, {"index", index}};
      sidecar["mode"] = edit_mode_name(req.mode);
      sidecar["intervals"] = edits;
      sidecar["steps"] = r.steps;
      sidecar["edit_mask"] = mask_json(r.edit_mask);
      sidecar["token_hierarchy"] = hierarchy_json(r.hierarchy);
      sidecar["source_hierarchy"] = hierarchy_json(r.source_hierarchy);
      set.motions.push_back(std::move(r.motion));
      set.conditions.push_back(program);
      write_motion_set(set, out_path);
      write_file_atomic(fs::path(out_path) / "sidecar.json", sidecar.dump(1) + "\n");
      write_file_atomic(fs::path(out_path) / "stats.json", to_json(bundle.tokenizer.stats).dump() + "\n");
      emit(out, {{"event", "edit"}, {"mode", edit_mode_name(req.mode)}, {"steps", r.steps}, {"out", out_path}});
      return 0;
    }

    if (ev->parsed()) {
      const RunConfig cfg = resolve_config(common);
      const MotionSet g = read_motion_set(gen_dir, cfg.corpus.grammar);
      const MotionSet r = read_motion_set(ref_dir, cfg.corpus.grammar);
      if (g.motions.empty() || r.motions.empty()) return fail("usage", "empty motion set", 2);
      const NormalizationStats stats = eval_stats(gen_dir, ref_dir, static_cast<int>(g.motions.front().channels()));
      const json metrics = compute_proxy_metrics(g, r, cfg.library(), stats).to_json();
      if (!out_path.empty()) write_file_atomic(out_path, metrics.dump(1) + "\n");
      emit(out, metrics);
      return 0;
    }

    if (ex->parsed()) {
      const std::string csv = metrics_jsonl_to_csv(read_file(metrics_path));
      if (out_path.empty())
        out << csv;
      else
        write_file_atomic(out_path, csv);
      return 0;
    }
  } catch (const ConfigError& e) {
    return fail(e.kind(), e.what(), 2);
  } catch (const ValidationError& e) {
    return fail(e.kind(), e.what(), 2);
  } catch (const Error& e) {
    return fail(e.kind(), e.what(), 1);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
  return fail("usage", "no subcommand", 2);
}

}  // namespace mscl
