#pragma once

// Next-scale transformer: scale-wise causal self-attention with normalized
// rotary positions, cross-attention to the raw condition embeddings, and an
// input pathway that concatenates the coarser-scale accumulated feature with
// in-scale token (or MASK) embeddings.

#include "mscl/tokenizer.hpp"

#include <cstdint>
#include <vector>

namespace mscl {

struct BackboneConfig {
  int blocks = 4;
  int model_dim = 128;
  int heads = 4;
  int vocab = 128;       // codebook size; input vocab has one extra MASK symbol
  int latent_dim = 64;   // D_e
  ScaleConfig scales;
  int cond_vocab = 10;
  int cond_dim = 64;     // D_t
  int cond_max_len = 10;
  double rope_base = 10000.0;
  // Sinusoidal encoding of each row's timeline position added to the block
  // input. Without it the all-MASK rows of the first scale are identical and
  // every position receives the same logits.
  bool absolute_positions = true;

  int mask_token() const { return vocab; }
  void validate() const;

  static BackboneConfig desk() { return {}; }
  static BackboneConfig paper();
};

// Bijection between flat positions and (scale, index within scale).
class SequenceLayout {
 public:
  explicit SequenceLayout(std::vector<int> lengths);

  int total() const { return total_; }
  int num_scales() const { return static_cast<int>(lengths_.size()); }
  int length(int k) const { return lengths_.at(static_cast<size_t>(k)); }
  int offset(int k) const { return offsets_.at(static_cast<size_t>(k)); }
  int scale_of(int i) const { return scale_.at(static_cast<size_t>(i)); }
  int index_in_scale(int i) const { return i - offset(scale_of(i)); }
  int flat(int k, int j) const { return offset(k) + j; }
  // Bin centre (j + 0.5) / L_k.
  double position(int k, int j) const { return (j + 0.5) / static_cast<double>(length(k)); }

 private:
  std::vector<int> lengths_;
  std::vector<int> offsets_;
  std::vector<int> scale_;
  int total_ = 0;
};

// allowed(i, j) iff scale(j) <= scale(i).
AttentionMask build_scale_causal_mask(const std::vector<int>& lengths);

struct ConditionSequence {
  std::vector<int> symbols;
  bool null = false;  // replaced by the learned null embedding
};

// Per-sample inputs for scales [0, K). prefix_accums[k] is the accumulated
// feature of scales < k (latent_len x D_e); entry 0 is unused.
struct ScaleInputs {
  std::vector<MatF> prefix_accums;
  std::vector<std::vector<int>> tokens;
  std::vector<std::vector<std::uint8_t>> visible;  // 0 = MASK
};

// All-MASK inputs for the given accumulations (the pure next-scale state).
ScaleInputs masked_inputs(const std::vector<MatF>& prefix_accums, const ScaleConfig& scales);

// Self-attention keys and values of committed scales, one matrix per block,
// rows grouped per batch element.
template <typename T>
struct KvCache {
  int groups = 0;
  int rows_per_group = 0;
  int scales = 0;  // number of committed scales held
  std::vector<Mat<T>> keys;
  std::vector<Mat<T>> values;
};

class Backbone {
 public:
  static Backbone create(const BackboneConfig& config, ParamSet<float>& params, Rng& rng);

  const BackboneConfig& config() const { return config_; }
  const SequenceLayout& layout() const { return layout_; }

  // Padded (B * S_max) x D_t condition rows; lengths receives S_b per element.
  template <typename T>
  Var embed_condition(Graph<T>& g, const ParamSet<T>& ps, const std::vector<ConditionSequence>& conds,
                      std::vector<int>& lengths) const;

  // One learned query attends over each group's condition rows (single head);
  // the result is projected to D. Returns B x D.
  template <typename T>
  Var pool_condition(Graph<T>& g, const ParamSet<T>& ps, Var cond_rows, const std::vector<int>& lengths) const;

  // Channel concatenation [pathway | token embedding] for scales [k0, k1) of
  // every batch element, before the input projection: (B * rows) x 2D.
  template <typename T>
  Var embed_pre_projection(Graph<T>& g, const ParamSet<T>& ps, const std::vector<const ScaleInputs*>& batch,
                           Var pooled, int k0, int k1) const;

  // Input projection plus scale embedding.
  template <typename T>
  Var embed_inputs(Graph<T>& g, const ParamSet<T>& ps, const std::vector<const ScaleInputs*>& batch, Var pooled,
                   int k0, int k1) const;

  // Full teacher-forced forward over every scale: (B * N_tot) x V logits.
  template <typename T>
  Var forward(Graph<T>& g, const ParamSet<T>& ps, const std::vector<const ScaleInputs*>& batch,
              const std::vector<ConditionSequence>& conds) const;

  // Logits for scale k only, (B * L_k) x V. Without a cache the prefix scales
  // are recomputed in their all-MASK state; with a cache holding exactly k
  // scales the prefix keys/values are read from it. When `capture` is set
  // the scale-k keys/values are appended to the cache (inputs must then be
  // all-MASK at scale k).
  template <typename T>
  Mat<T> forward_scale(const ParamSet<T>& ps, const std::vector<const ScaleInputs*>& batch,
                       const std::vector<ConditionSequence>& conds, int k, KvCache<T>* cache, bool capture) const;

 private:
  struct Block {
    nn::Norm ln1;
    nn::Linear q, k, v, o;
    nn::Norm ln2;
    nn::Linear cq, ck, cv, co;
    nn::Norm ln3;
    nn::FeedForward ffn;
  };

  template <typename T>
  Var run_blocks(Graph<T>& g, const ParamSet<T>& ps, Var x, const std::vector<T>& positions,
                 const AttentionMask* mask, int groups, Var cond_rows, const std::vector<int>& cond_lengths,
                 KvCache<T>* cache, bool capture) const;

  BackboneConfig config_;
  SequenceLayout layout_{{1}};
  ParamId cond_embed_ = -1;
  ParamId cond_pos_ = -1;
  ParamId cond_null_ = -1;
  ParamId pool_query_ = -1;
  nn::Linear pool_proj_;
  ParamId tok_embed_ = -1;
  nn::Linear lat_proj_;
  nn::Linear in_proj_;
  ParamId scale_embed_ = -1;
  std::vector<Block> blocks_;
  nn::Norm ln_f_;
  nn::Linear out_;
};

}  // namespace mscl
