#pragma once

// Training: tokenizer optimisation with EMA codebook updates, and backbone
// teacher forcing with cross-scale corruption (recomputed residual targets),
// in-scale masking and condition dropout.

#include "mscl/backbone.hpp"
#include "mscl/corpus.hpp"
#include "mscl/optim.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>

namespace mscl {

// ---------------------------------------------------------------- models

struct TokenizerModel {
  TokenizerConfig config;
  TokenizerNet net;
  ParamSet<float> params;
  Codebook<float> codebook;
  NormalizationStats stats;

  static TokenizerModel create(const TokenizerConfig& config, const NormalizationStats& stats, std::uint64_t seed);
};

struct BackboneModel {
  BackboneConfig config;
  Backbone net;
  ParamSet<float> params;

  static BackboneModel create(const BackboneConfig& config, std::uint64_t seed);
};

// Normalized T_max x D_m model input. Every row is normalized, padding
// included, so the padded tail is an explicit rest segment the decoder
// learns to reproduce.
MatF model_frames(const MotionSequence& motion, const NormalizationStats& stats);
// Inverse of model_frames; the result has valid_len = T_max.
MotionSequence motion_from_model_frames(const MatF& frames, const NormalizationStats& stats, double fps = 20.0);

MatF encode_latent(const TokenizerModel& tok, const MatF& frames);
MatF decode_latent(const TokenizerModel& tok, const MatF& accum);
// decode(dequantize(tokenize(encode(frames)))).
MatF tokenizer_round_trip(const TokenizerModel& tok, const MatF& frames);

// ---------------------------------------------------------------- tokenizer training

struct TokenizerTrainConfig {
  int epochs = 30;
  int batch = 32;
  AdamConfig adam{1e-3, 0.9, 0.99, 1e-8, 100, 1.0};
  std::uint64_t seed = 0;
};

struct TokenizerEpochMetrics {
  int epoch = 0;
  double train_loss = 0;
  double val_recon_mse = 0;
  int codes_used = 0;
  int reseeded = 0;
  double lr = 0;
};

std::vector<TokenizerEpochMetrics> train_tokenizer(
    TokenizerModel& tok, const std::vector<MatF>& train_frames, const std::vector<MatF>& val_frames,
    const TokenizerTrainConfig& config, const std::function<void(const TokenizerEpochMetrics&)>& on_epoch = {});

// Mean squared error over all rows of the tokenizer round trip.
double reconstruction_mse(const TokenizerModel& tok, const std::vector<MatF>& frames);

// ---------------------------------------------------------------- corruption and targets

struct Corruption {
  std::vector<int> tokens;
  std::vector<int> positions;  // sorted
};

// Replaces exactly floor(gamma * L) uniformly chosen positions by uniform
// tokens in [0, vocab).
Corruption corrupt_tokens(const std::vector<int>& tokens, double gamma, int vocab, Rng& rng);

struct CorruptionSpec {
  double gamma_max = 0.6;
  std::vector<double> gammas;  // one per scale, in [0, gamma_max]

  static CorruptionSpec sample(double gamma_max, int num_scales, Rng& rng);
  static CorruptionSpec none(int num_scales);
  void validate(int num_scales) const;
};

struct RefinedTargets {
  std::vector<std::vector<int>> targets;    // z'_k, supervision at scale k
  std::vector<std::vector<int>> corrupted;  // corrupted z'_k
  std::vector<std::vector<int>> corrupted_positions;
  std::vector<MatF> input_accums;           // sum of up(lookup(corrupted)) over scales < k
};

RefinedTargets build_refined_targets(const MatF& latent, const ScaleTokenHierarchy& clean, const CorruptionSpec& spec,
                                     const ScaleConfig& config, const MatF& codebook, Rng& rng);

struct InScaleMaskPolicy {
  double pure_ar_prob = 0.5;
  enum class Force { none, pure_ar, partial } force = Force::none;
};

// Masked positions on the partial branch: ceil(rho * L), at least 1.
inline int masked_count(int length, double rho) {
  return std::clamp(static_cast<int>(std::ceil(rho * length)), 1, length);
}

// true = visible. Either all positions masked, or ceil(rho * L) >= 1 masked
// for rho ~ U(0, 1).
std::vector<std::uint8_t> sample_in_scale_mask(int length, Rng& rng, const InScaleMaskPolicy& policy = {});

struct TrainingExample {
  ScaleInputs inputs;                            // visible target tokens, MASK elsewhere
  std::vector<std::vector<int>> targets;
  std::vector<std::vector<std::uint8_t>> supervised;
  ConditionSequence condition;
};

struct ExampleSource {
  const MatF* latent = nullptr;
  const ScaleTokenHierarchy* clean = nullptr;
  std::vector<int> condition;
};

TrainingExample make_example(const ExampleSource& src, const ScaleConfig& scales, const MatF& codebook,
                             double gamma_max, const InScaleMaskPolicy& policy, Rng& rng);

struct StepResult {
  double loss = 0;
  std::vector<double> per_scale_loss;
  std::vector<long> per_scale_count;
  long supervised = 0;
  long correct = 0;
  int nulled = 0;
  int skipped = 0;
};

// Mean cross-entropy over supervised positions of the batch; conditions are
// nulled per sample with probability guidance_drop_prob. Gradients are added
// into `grads` when given.
template <typename T>
StepResult training_step(const Backbone& net, const ParamSet<T>& params, const std::vector<TrainingExample>& batch,
                         double guidance_drop_prob, Rng& rng, GradSet<T>* grads);

// ---------------------------------------------------------------- backbone training

struct TrainConfig {
  int epochs = 30;
  int batch = 32;
  AdamConfig adam{3e-4, 0.9, 0.999, 1e-8, 200, 1.0};
  double gamma_max = 0.6;
  InScaleMaskPolicy mask_policy;
  double guidance_drop = 0.1;
  std::uint64_t seed = 0;
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  std::vector<double> per_scale_loss;  // validation
  double masked_acc = 0;               // validation
  double lr = 0;
};

struct TrainData {
  std::vector<MatF> latents;
  std::vector<ScaleTokenHierarchy> hierarchies;
  std::vector<std::vector<int>> conditions;
};

// Encodes and tokenizes the given motions with the frozen tokenizer.
TrainData prepare_train_data(const TokenizerModel& tok, const std::vector<MotionSequence>& motions,
                             const std::vector<ConditionProgram>& programs, const Grammar& grammar);

struct TrainResult {
  std::vector<EpochMetrics> history;
  int best_epoch = 0;  // 0 = initialization
  bool diverged = false;
};

// Trains in place; on return `model.params` holds the best-validation
// parameters (the initialization when epochs = 0).
TrainResult train_backbone(BackboneModel& model, const MatF& codebook, const TrainData& train, const TrainData& val,
                           const TrainConfig& config, const std::function<void(const EpochMetrics&)>& on_epoch = {});

StepResult evaluate_backbone(const BackboneModel& model, const MatF& codebook, const TrainData& data,
                             const TrainConfig& config, std::uint64_t seed);

}  // namespace mscl
