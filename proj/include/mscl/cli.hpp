#pragma once

// Run configuration, desk-scale evaluation metrics and the `mscl` command
// surface. Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

#include "mscl/checkpoint.hpp"
#include "mscl/editor.hpp"
#include "mscl/trainer.hpp"

#include <iosfwd>

namespace mscl {

// Derived fields (backbone vocab, latent dim, scales, condition vocabulary,
// tokenizer channels) are not keys of their own; sync() copies them from the
// corpus and tokenizer sections.
struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  CorpusSpec corpus;
  TokenizerConfig tokenizer;
  TokenizerTrainConfig tokenizer_train;
  BackboneConfig backbone;
  TrainConfig backbone_train;
  GuidanceSpec guidance;
  RefinementSchedule schedule;
  std::string checkpoint;  // default model path for generate/edit/eval

  static RunConfig desk();
  static RunConfig paper();
  static RunConfig preset_named(const std::string& name);

  // Starts from doc["preset"] (default desk) and applies every other key as
  // an override. Unknown keys and wrong types are ConfigErrors.
  static RunConfig from_json(const nlohmann::json& doc);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  void sync();
  void validate() const;
  MotifLibrary library() const { return MotifLibrary(corpus.grammar.num_motifs, corpus.channels, corpus.cycle_len); }
};

struct ProxyMetrics {
  std::optional<double> oracle_exact_match_rate;
  std::optional<double> oracle_repetition_accuracy;
  std::optional<double> proxy_diversity;
  std::optional<double> proxy_mmodality;
  std::optional<double> reconstruction_mse;
  // Oracle rates of the reference set, for calibration.
  std::optional<double> reference_exact_match_rate;
  std::optional<double> reference_repetition_accuracy;

  nlohmann::json to_json() const;
};

struct OracleScore {
  int evaluated = 0;  // motions with a recorded condition
  int exact = 0;
  int reps = 0;
};

OracleScore oracle_score(const MotionSet& set, const MotifLibrary& library);

// Distances use all normalized frames of a motion flattened to one vector.
// Diversity averages over all unordered pairs (null below two motions).
// MModality averages pairwise distances inside groups sharing a condition
// (null when no group has two members). Reconstruction MSE pairs motions by
// index and is null when the sets do not line up.
ProxyMetrics compute_proxy_metrics(const MotionSet& generated, const MotionSet& reference,
                                   const MotifLibrary& library, const NormalizationStats& stats);

// CSV export of a training-metrics JSONL file. Backbone columns:
// epoch,train_loss,val_loss,masked_acc,lr,per_scale_loss_0..K-1.
// Tokenizer columns: epoch,train_loss,val_recon_mse,codes_used,reseeded,lr.
std::string metrics_jsonl_to_csv(const std::string& jsonl);

int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mscl
