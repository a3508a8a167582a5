#pragma once

// Residual multi-scale tokenizer: temporal conv/attention encoder, K-scale
// residual quantizer over one shared EMA codebook, and the mirrored decoder.

#include "mscl/nn.hpp"

#include <string>
#include <vector>

namespace mscl {

struct ScaleConfig {
  std::vector<int> lengths{6, 12, 24, 48};
  int downsample = 4;
  int t_max = 192;

  int num_scales() const { return static_cast<int>(lengths.size()); }
  int latent_len() const { return t_max / downsample; }
  int length(int k) const { return lengths.at(static_cast<size_t>(k)); }
  int total_tokens() const;
  // First flat index of scale k in the concatenated token sequence.
  int offset(int k) const;
  void validate() const;

  static ScaleConfig desk() { return {}; }
  static ScaleConfig paper() { return {{6, 12, 24, 49}, 4, 196}; }
};

enum class ResampleMode { down, up };

// Linear time-resampling operator of shape target x n. down: mean over
// contiguous bins with edges round(j*n/target); up: align-corners linear
// interpolation.
template <typename T>
Mat<T> resample_operator(Index n, Index target, ResampleMode mode);

template <typename T>
Mat<T> resample_time(const Mat<T>& x, Index target, ResampleMode mode);

// First latent row covered by token j of a scale with `length` tokens.
int bin_start(int j, int length, int latent_len);

template <typename T>
struct Codebook {
  Mat<T> entries;  // V x D_e
  std::vector<T> ema_counts;
  Mat<T> ema_sums;
  T decay = T(0.99);
  std::vector<int> idle_updates;  // consecutive updates without assignment

  static constexpr double kEpsilon = 1e-5;

  // EMA state consistent with the given entries (unit counts).
  static Codebook from_entries(Mat<T> entries, T decay);
  int size() const { return static_cast<int>(entries.rows()); }
  int dim() const { return static_cast<int>(entries.cols()); }
  void validate() const;
};

template <typename T>
struct Quantized {
  std::vector<int> tokens;
  Mat<T> embeddings;
};

// Nearest entry by squared Euclidean distance; ties go to the lowest index.
template <typename T>
Quantized<T> quantize_residual(const Mat<T>& residual, const Mat<T>& codebook);

struct ScaleTokenHierarchy {
  std::vector<std::vector<int>> tokens;

  bool operator==(const ScaleTokenHierarchy&) const = default;
  void validate(const ScaleConfig& config, int vocab) const;
  std::string to_json() const;
  static ScaleTokenHierarchy from_json(const std::string& text);
};

template <typename T>
struct AccumulatedFeature {
  Mat<T> values;  // latent_len x D_e
  int upto_scale = 0;
};

template <typename T>
struct MultiScaleTokens {
  ScaleTokenHierarchy hierarchy;
  std::vector<Mat<T>> targets;                 // f_k, L_k x D_e
  std::vector<AccumulatedFeature<T>> accums;   // accums[k] = sum of scales 0..k
};

// up(lookup(z), latent_len) for one scale.
template <typename T>
Mat<T> scale_feature(const std::vector<int>& tokens, const ScaleConfig& config, const Mat<T>& codebook);

template <typename T>
MultiScaleTokens<T> multi_scale_tokenize(const Mat<T>& latent, const ScaleConfig& config, const Mat<T>& codebook);

template <typename T>
AccumulatedFeature<T> dequantize(const ScaleTokenHierarchy& hierarchy, const ScaleConfig& config,
                                 const Mat<T>& codebook, int upto);

struct Assignment {
  int token = 0;
  Index row = 0;
};

// counts <- decay*counts + (1-decay)*n_v, sums likewise, and every entry
// with a positive count becomes sums / (counts + eps).
template <typename T>
Codebook<T> ema_update(const Codebook<T>& codebook, const Mat<T>& rows, const std::vector<Assignment>& assignments,
                       T decay);

// Re-seeds entries idle for at least `threshold` updates with random rows.
// Returns the number of re-seeded entries.
template <typename T>
int reseed_dead_codes(Codebook<T>& codebook, const Mat<T>& candidates, int threshold, Rng& rng);

struct TokenizerLossWeights {
  double reconstruction = 1.0;
  double feature = 0.5;
  double commitment = 0.02;
};

struct TokenizerConfig {
  int motion_dim = 8;
  int width = 64;
  int latent_dim = 64;
  int heads = 2;
  int codebook_size = 128;
  ScaleConfig scales;
  double ema_decay = 0.99;
  int dead_code_steps = 256;
  TokenizerLossWeights weights;

  void validate() const;
};

// Encoder/decoder architecture; parameter values live in a ParamSet.
class TokenizerNet {
 public:
  static TokenizerNet create(const TokenizerConfig& config, ParamSet<float>& params, Rng& rng,
                             bool zero_final_projection = false);

  const TokenizerConfig& config() const { return config_; }

  // T x D_m normalized motion -> (T/l) x D_e latent.
  template <typename T>
  Var encode(Graph<T>& g, const ParamSet<T>& ps, Var motion) const;
  // (T/l) x D_e accumulated feature -> T x D_m normalized motion.
  template <typename T>
  Var decode(Graph<T>& g, const ParamSet<T>& ps, Var accum) const;

 private:
  struct DownStage {
    nn::Conv conv;
    nn::ResBlock res;
    nn::AttentionBlock attn;
  };
  struct UpStage {
    nn::ResBlock res;
    nn::Conv conv;
    nn::AttentionBlock attn;
  };

  TokenizerConfig config_;
  nn::Linear enc_in_;
  std::vector<DownStage> enc_stages_;
  nn::Norm enc_norm_;
  nn::Linear enc_out_;
  nn::Linear dec_in_;
  std::vector<UpStage> dec_stages_;
  nn::Norm dec_norm_;
  nn::Linear dec_out_;
};

template <typename T>
struct TokenizerLossTerms {
  Var total;
  Var reconstruction;
  Var feature;
  Var commitment;
};

// w_rec*MSE(m, m_hat) + w_feat*MSE(diff m, diff m_hat) + w_commit*MSE(f, sg(f_hat)),
// each over valid rows only. `quantized` enters as a constant.
template <typename T>
TokenizerLossTerms<T> tokenizer_loss(Graph<T>& g, Var motion, Var reconstruction, Var latent,
                                     const Mat<T>& quantized, int valid_frames, int valid_latent,
                                     const TokenizerLossWeights& weights);

// Rows of the latent covered by valid frames.
inline int valid_latent_rows(int valid_frames, int downsample) { return (valid_frames + downsample - 1) / downsample; }

}  // namespace mscl
