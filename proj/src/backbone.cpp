#include "mscl/backbone.hpp"

#include <algorithm>

namespace mscl {

BackboneConfig BackboneConfig::paper() {
  BackboneConfig c;
  c.blocks = 16;
  c.model_dim = 768;
  c.heads = 8;
  c.vocab = 512;
  c.latent_dim = 512;
  c.scales = ScaleConfig::paper();
  c.cond_dim = 512;
  return c;
}

void BackboneConfig::validate() const {
  scales.validate();
  if (blocks < 1 || model_dim < 2 || heads < 1) throw ConfigError("backbone: blocks, width and heads must be positive");
  if (model_dim % heads != 0) throw ConfigError("backbone: model_dim must be divisible by heads");
  if ((model_dim / heads) % 2 != 0) throw ConfigError("backbone: head dimension must be even for rotary positions");
  if (vocab < 2) throw ConfigError("backbone: vocab must be >= 2");
  if (latent_dim < 1 || cond_dim < 1) throw ConfigError("backbone: latent and condition widths must be positive");
  if (cond_vocab < 1 || cond_max_len < 1) throw ConfigError("backbone: condition vocabulary and length must be positive");
}

SequenceLayout::SequenceLayout(std::vector<int> lengths) : lengths_(std::move(lengths)) {
  if (lengths_.empty()) throw ConfigError("layout: at least one scale required");
  for (size_t k = 0; k < lengths_.size(); ++k) {
    if (lengths_[k] < 1) throw ConfigError("layout: scale lengths must be positive");
    offsets_.push_back(total_);
    for (int j = 0; j < lengths_[k]; ++j) scale_.push_back(static_cast<int>(k));
    total_ += lengths_[k];
  }
}

AttentionMask build_scale_causal_mask(const std::vector<int>& lengths) {
  SequenceLayout layout(lengths);
  const int n = layout.total();
  AttentionMask m{n, n, std::vector<std::uint8_t>(static_cast<size_t>(n) * static_cast<size_t>(n), 0)};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      m.allowed[static_cast<size_t>(i) * static_cast<size_t>(n) + static_cast<size_t>(j)] =
          layout.scale_of(j) <= layout.scale_of(i) ? 1 : 0;
  return m;
}

ScaleInputs masked_inputs(const std::vector<MatF>& prefix_accums, const ScaleConfig& scales) {
  ScaleInputs in;
  in.prefix_accums = prefix_accums;
  for (int k = 0; k < scales.num_scales(); ++k) {
    in.tokens.emplace_back(static_cast<size_t>(scales.length(k)), 0);
    in.visible.emplace_back(static_cast<size_t>(scales.length(k)), 0);
  }
  return in;
}

Backbone Backbone::create(const BackboneConfig& config, ParamSet<float>& params, Rng& rng) {
  config.validate();
  Backbone b;
  b.config_ = config;
  b.layout_ = SequenceLayout(config.scales.lengths);
  const Index d = config.model_dim, dt = config.cond_dim;
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double cond_std = 1.0 / std::sqrt(static_cast<double>(dt));
  // Residual branch outputs are shrunk with depth.
  const double res_std = 1.0 / std::sqrt(static_cast<double>(d) * 2.0 * config.blocks);

  b.cond_embed_ = params.add("cond.embed", nn::random_matrix(config.cond_vocab, dt, cond_std, rng));
  b.cond_pos_ = params.add("cond.pos", nn::random_matrix(config.cond_max_len, dt, cond_std, rng));
  b.cond_null_ = params.add("cond.null", nn::random_matrix(1, dt, cond_std, rng));
  b.pool_query_ = params.add("pool.query", nn::random_matrix(1, dt, cond_std, rng));
  b.pool_proj_ = nn::make_linear(params, "pool.proj", dt, d, rng);
  b.tok_embed_ = params.add("tok.embed", nn::random_matrix(config.vocab + 1, d, emb_std, rng));
  b.lat_proj_ = nn::make_linear(params, "lat.proj", config.latent_dim, d, rng, false);
  b.in_proj_ = nn::make_linear(params, "in.proj", 2 * d, d, rng);
  b.scale_embed_ = params.add("scale.embed", nn::random_matrix(config.scales.num_scales(), d, emb_std, rng));
  for (int i = 0; i < config.blocks; ++i) {
    const std::string p = "block" + std::to_string(i);
    Block blk;
    blk.ln1 = nn::make_norm(params, p + ".ln1", d);
    blk.q = nn::make_linear(params, p + ".self.q", d, d, rng);
    blk.k = nn::make_linear(params, p + ".self.k", d, d, rng);
    blk.v = nn::make_linear(params, p + ".self.v", d, d, rng);
    blk.o = nn::make_linear(params, p + ".self.o", d, d, rng, true, res_std);
    blk.ln2 = nn::make_norm(params, p + ".ln2", d);
    blk.cq = nn::make_linear(params, p + ".cross.q", d, d, rng);
    blk.ck = nn::make_linear(params, p + ".cross.k", dt, d, rng);
    blk.cv = nn::make_linear(params, p + ".cross.v", dt, d, rng);
    blk.co = nn::make_linear(params, p + ".cross.o", d, d, rng, true, res_std);
    blk.ln3 = nn::make_norm(params, p + ".ln3", d);
    blk.ffn.up = nn::make_linear(params, p + ".ffn.fc1", d, 4 * d, rng);
    blk.ffn.down = nn::make_linear(params, p + ".ffn.fc2", 4 * d, d, rng, true, res_std / 2.0);
    b.blocks_.push_back(blk);
  }
  b.ln_f_ = nn::make_norm(params, "ln_f", d);
  b.out_ = nn::make_linear(params, "out", d, config.vocab, rng, true, 0.02);
  return b;
}

template <typename T>
Var Backbone::embed_condition(Graph<T>& g, const ParamSet<T>& ps, const std::vector<ConditionSequence>& conds,
                              std::vector<int>& lengths) const {
  if (conds.empty()) throw ShapeError("embed_condition: empty batch");
  lengths.clear();
  for (const auto& c : conds) {
    const int s = c.null ? 1 : static_cast<int>(c.symbols.size());
    if (s < 1) throw ValidationError("condition must contain at least one symbol");
    if (s > config_.cond_max_len) throw ValidationError("condition longer than the configured maximum");
    for (int sym : c.symbols)
      if (!c.null && (sym < 0 || sym >= config_.cond_vocab)) throw ValidationError("condition symbol out of range");
    lengths.push_back(s);
  }
  const int smax = *std::max_element(lengths.begin(), lengths.end());
  Var table = g.param(ps, cond_embed_);
  Var pos = g.param(ps, cond_pos_);
  Var null_row = g.param(ps, cond_null_);
  std::vector<Var> parts;
  for (size_t b = 0; b < conds.size(); ++b) {
    const int s = lengths[b];
    if (conds[b].null)
      parts.push_back(null_row);
    else
      parts.push_back(ops::add(g, ops::gather_rows(g, table, conds[b].symbols), ops::slice_rows(g, pos, 0, s)));
    if (s < smax) parts.push_back(g.constant(Mat<T>::Zero(smax - s, config_.cond_dim)));
  }
  return parts.size() == 1 ? parts[0] : ops::concat_rows(g, parts);
}

template <typename T>
Var Backbone::pool_condition(Graph<T>& g, const ParamSet<T>& ps, Var cond_rows, const std::vector<int>& lengths) const {
  const int groups = static_cast<int>(lengths.size());
  Var q = ops::broadcast_rows(g, g.param(ps, pool_query_), groups);
  Var pooled = ops::attention(g, q, cond_rows, cond_rows, 1, nullptr, groups, &lengths);
  return nn::apply(g, ps, pool_proj_, pooled);
}

template <typename T>
Var Backbone::embed_pre_projection(Graph<T>& g, const ParamSet<T>& ps, const std::vector<const ScaleInputs*>& batch,
                                   Var pooled, int k0, int k1) const {
  const auto& sc = config_.scales;
  if (k0 < 0 || k1 > sc.num_scales() || k0 >= k1) throw ShapeError("embed_inputs: bad scale range");
  if (k0 == 0 && !pooled.valid()) throw ShapeError("embed_inputs: scale 0 needs the pooled condition");
  // Coarser-scale pathway, all batch elements stacked for one projection.
  const int kl = std::max(k0, 1);
  Index lat_rows_per = 0;
  for (int k = kl; k < k1; ++k) lat_rows_per += sc.length(k);
  Var lat;
  if (lat_rows_per > 0) {
    Mat<T> stacked(lat_rows_per * static_cast<Index>(batch.size()), config_.latent_dim);
    Index r = 0;
    for (const ScaleInputs* in : batch) {
      if (static_cast<int>(in->prefix_accums.size()) < k1) throw ShapeError("embed_inputs: missing prefix accumulation");
      for (int k = kl; k < k1; ++k) {
        const MatF& acc = in->prefix_accums[static_cast<size_t>(k)];
        if (acc.rows() != sc.latent_len() || acc.cols() != config_.latent_dim)
          throw ShapeError("embed_inputs: accumulated feature shape mismatch");
        stacked.middleRows(r, sc.length(k)) = resample_time<T>(acc.template cast<T>(), sc.length(k), ResampleMode::down);
        r += sc.length(k);
      }
    }
    lat = nn::apply(g, ps, lat_proj_, g.constant(std::move(stacked)));
  }

  std::vector<Var> left;
  std::vector<int> ids;
  for (size_t b = 0; b < batch.size(); ++b) {
    const ScaleInputs* in = batch[b];
    if (static_cast<int>(in->tokens.size()) < k1 || static_cast<int>(in->visible.size()) < k1)
      throw ShapeError("embed_inputs: missing token inputs");
    if (k0 == 0) left.push_back(ops::broadcast_rows(g, ops::slice_rows(g, pooled, static_cast<Index>(b), 1), sc.length(0)));
    if (lat.valid()) left.push_back(ops::slice_rows(g, lat, static_cast<Index>(b) * lat_rows_per, lat_rows_per));
    for (int k = k0; k < k1; ++k) {
      const auto& z = in->tokens[static_cast<size_t>(k)];
      const auto& vis = in->visible[static_cast<size_t>(k)];
      if (static_cast<int>(z.size()) != sc.length(k) || static_cast<int>(vis.size()) != sc.length(k))
        throw ShapeError("embed_inputs: scale " + std::to_string(k) + " token count mismatch");
      for (size_t j = 0; j < z.size(); ++j) {
        if (vis[j] && (z[j] < 0 || z[j] >= config_.vocab)) throw CorruptionError("embed_inputs: token out of range");
        ids.push_back(vis[j] ? z[j] : config_.mask_token());
      }
    }
  }
  Var lhs = left.size() == 1 ? left[0] : ops::concat_rows(g, left);
  return ops::concat_cols(g, lhs, ops::gather_rows(g, g.param(ps, tok_embed_), ids));
}

template <typename T>
Var Backbone::embed_inputs(Graph<T>& g, const ParamSet<T>& ps, const std::vector<const ScaleInputs*>& batch,
                           Var pooled, int k0, int k1) const {
  Var x = nn::apply(g, ps, in_proj_, embed_pre_projection(g, ps, batch, pooled, k0, k1));
  std::vector<int> scale_ids;
  for (size_t b = 0; b < batch.size(); ++b)
    for (int k = k0; k < k1; ++k)
      for (int j = 0; j < config_.scales.length(k); ++j) scale_ids.push_back(k);
  return ops::add(g, x, ops::gather_rows(g, g.param(ps, scale_embed_), scale_ids));
}

template <typename T>
Var Backbone::run_blocks(Graph<T>& g, const ParamSet<T>& ps, Var x, const std::vector<T>& positions,
                         const AttentionMask* mask, int groups, Var cond_rows, const std::vector<int>& cond_lengths,
                         KvCache<T>* cache, bool capture) const {
  const int heads = config_.heads;
  const Index dh = config_.model_dim / heads;
  const auto freqs = nn::rope_frequencies<T>(dh, config_.rope_base, config_.scales.latent_len());
  const Index n = g.value(x).rows() / groups;
  const bool use_cache = cache && cache->scales > 0;
  if (config_.absolute_positions) {
    const Index d = config_.model_dim;
    const double span = config_.scales.latent_len();
    Mat<T> pe(static_cast<Index>(positions.size()), d);
    for (Index r = 0; r < pe.rows(); ++r)
      for (Index p = 0; p < d / 2; ++p) {
        const double angle = static_cast<double>(positions[static_cast<size_t>(r)]) * span *
                             std::pow(config_.rope_base, -2.0 * static_cast<double>(p) / static_cast<double>(d));
        pe(r, 2 * p) = static_cast<T>(std::sin(angle));
        pe(r, 2 * p + 1) = static_cast<T>(std::cos(angle));
      }
    x = ops::add(g, x, g.constant(pe));
  }
  std::vector<Mat<T>> new_keys, new_values;

  for (size_t i = 0; i < blocks_.size(); ++i) try {
    const Block& blk = blocks_[i];
    Var h = nn::apply(g, ps, blk.ln1, x);
    Var q = ops::rope(g, nn::apply(g, ps, blk.q, h), positions, freqs, heads);
    Var k = ops::rope(g, nn::apply(g, ps, blk.k, h), positions, freqs, heads);
    Var v = nn::apply(g, ps, blk.v, h);
    if (capture) {
      new_keys.push_back(g.value(k));
      new_values.push_back(g.value(v));
    }
    Var kf = k, vf = v;
    if (use_cache) {
      const Index p = cache->rows_per_group;
      std::vector<Var> kp, vp;
      for (int b = 0; b < groups; ++b) {
        kp.push_back(g.constant(cache->keys[i].middleRows(b * p, p)));
        kp.push_back(ops::slice_rows(g, k, b * n, n));
        vp.push_back(g.constant(cache->values[i].middleRows(b * p, p)));
        vp.push_back(ops::slice_rows(g, v, b * n, n));
      }
      kf = ops::concat_rows(g, kp);
      vf = ops::concat_rows(g, vp);
    }
    x = ops::add(g, x, nn::apply(g, ps, blk.o, ops::attention(g, q, kf, vf, heads, mask, groups)));

    Var cq = nn::apply(g, ps, blk.cq, nn::apply(g, ps, blk.ln2, x));
    Var ck = nn::apply(g, ps, blk.ck, cond_rows);
    Var cv = nn::apply(g, ps, blk.cv, cond_rows);
    x = ops::add(g, x, nn::apply(g, ps, blk.co, ops::attention(g, cq, ck, cv, heads, nullptr, groups, &cond_lengths)));

    x = ops::add(g, x, nn::apply(g, ps, blk.ffn, nn::apply(g, ps, blk.ln3, x)));
    require_finite(g.value(x), "output");
  } catch (const NumericError& e) {
    throw NumericError("backbone.block" + std::to_string(i) + ": " + e.what());
  }

  if (capture) {
    if (!cache) throw ShapeError("forward: capture requested without a cache");
    const Index p = cache->scales > 0 ? cache->rows_per_group : 0;
    if (cache->keys.empty()) {
      cache->keys.resize(blocks_.size());
      cache->values.resize(blocks_.size());
    }
    for (size_t i = 0; i < blocks_.size(); ++i) {
      Mat<T> kk(groups * (p + n), config_.model_dim), vv(groups * (p + n), config_.model_dim);
      for (int b = 0; b < groups; ++b) {
        if (p > 0) {
          kk.middleRows(b * (p + n), p) = cache->keys[i].middleRows(b * p, p);
          vv.middleRows(b * (p + n), p) = cache->values[i].middleRows(b * p, p);
        }
        kk.middleRows(b * (p + n) + p, n) = new_keys[i].middleRows(b * n, n);
        vv.middleRows(b * (p + n) + p, n) = new_values[i].middleRows(b * n, n);
      }
      cache->keys[i] = std::move(kk);
      cache->values[i] = std::move(vv);
    }
    cache->groups = groups;
    cache->rows_per_group = static_cast<int>(p + n);
    cache->scales += 1;
  }
  return nn::apply(g, ps, out_, nn::apply(g, ps, ln_f_, x));
}

template <typename T>
Var Backbone::forward(Graph<T>& g, const ParamSet<T>& ps, const std::vector<const ScaleInputs*>& batch,
                      const std::vector<ConditionSequence>& conds) const {
  if (batch.size() != conds.size()) throw ShapeError("forward: one condition per batch element required");
  std::vector<int> lengths;
  Var cond_rows = embed_condition(g, ps, conds, lengths);
  Var pooled = pool_condition(g, ps, cond_rows, lengths);
  const int k = config_.scales.num_scales();
  Var x = embed_inputs(g, ps, batch, pooled, 0, k);
  std::vector<T> positions;
  for (size_t b = 0; b < batch.size(); ++b)
    for (int i = 0; i < layout_.total(); ++i)
      positions.push_back(static_cast<T>(layout_.position(layout_.scale_of(i), layout_.index_in_scale(i))));
  const AttentionMask mask = build_scale_causal_mask(config_.scales.lengths);
  return run_blocks(g, ps, x, positions, &mask, static_cast<int>(batch.size()), cond_rows, lengths,
                    static_cast<KvCache<T>*>(nullptr), false);
}

template <typename T>
Mat<T> Backbone::forward_scale(const ParamSet<T>& ps, const std::vector<const ScaleInputs*>& batch,
                               const std::vector<ConditionSequence>& conds, int k, KvCache<T>* cache,
                               bool capture) const {
  if (batch.size() != conds.size()) throw ShapeError("forward_scale: one condition per batch element required");
  if (k < 0 || k >= config_.scales.num_scales()) throw ShapeError("forward_scale: scale out of range");
  const int groups = static_cast<int>(batch.size());
  const int lk = config_.scales.length(k);
  if (capture) {
    for (const ScaleInputs* in : batch)
      for (auto v : in->visible.at(static_cast<size_t>(k)))
        if (v) throw ValidationError("forward_scale: cached rows must be in the all-MASK state");
  }
  Graph<T> g(false);
  std::vector<int> lengths;
  Var cond_rows = embed_condition(g, ps, conds, lengths);

  if (cache) {
    if (cache->scales != k) throw ValidationError("forward_scale: cache does not hold exactly the prefix scales");
    if (cache->scales > 0 && cache->groups != groups) throw ShapeError("forward_scale: cache batch size mismatch");
    Var pooled = k == 0 ? pool_condition(g, ps, cond_rows, lengths) : Var{};
    Var x = embed_inputs(g, ps, batch, pooled, k, k + 1);
    std::vector<T> positions;
    for (int b = 0; b < groups; ++b)
      for (int j = 0; j < lk; ++j) positions.push_back(static_cast<T>(layout_.position(k, j)));
    return g.value(run_blocks(g, ps, x, positions, nullptr, groups, cond_rows, lengths, cache, capture));
  }
  if (capture) throw ShapeError("forward_scale: capture requested without a cache");

  // Uncached: recompute the prefix scales in their all-MASK state.
  std::vector<ScaleInputs> masked;
  masked.reserve(batch.size());
  for (const ScaleInputs* in : batch) {
    ScaleInputs m = *in;
    for (int s = 0; s < k; ++s) std::fill(m.visible[static_cast<size_t>(s)].begin(), m.visible[static_cast<size_t>(s)].end(), 0);
    masked.push_back(std::move(m));
  }
  std::vector<const ScaleInputs*> ptrs;
  for (const auto& m : masked) ptrs.push_back(&m);
  Var pooled = pool_condition(g, ps, cond_rows, lengths);
  Var x = embed_inputs(g, ps, ptrs, pooled, 0, k + 1);
  const std::vector<int> prefix(config_.scales.lengths.begin(), config_.scales.lengths.begin() + k + 1);
  SequenceLayout sub(prefix);
  std::vector<T> positions;
  for (int b = 0; b < groups; ++b)
    for (int i = 0; i < sub.total(); ++i)
      positions.push_back(static_cast<T>(sub.position(sub.scale_of(i), sub.index_in_scale(i))));
  const AttentionMask mask = build_scale_causal_mask(prefix);
  const Mat<T>& all = g.value(run_blocks(g, ps, x, positions, &mask, groups, cond_rows, lengths,
                                         static_cast<KvCache<T>*>(nullptr), false));
  Mat<T> out(groups * lk, config_.vocab);
  for (int b = 0; b < groups; ++b) out.middleRows(b * lk, lk) = all.middleRows(b * sub.total() + sub.offset(k), lk);
  return out;
}

#define MSCL_INSTANTIATE_BACKBONE(T)                                                                               \
  template Var Backbone::embed_condition<T>(Graph<T>&, const ParamSet<T>&, const std::vector<ConditionSequence>&, \
                                            std::vector<int>&) const;                                             \
  template Var Backbone::pool_condition<T>(Graph<T>&, const ParamSet<T>&, Var, const std::vector<int>&) const;    \
  template Var Backbone::embed_pre_projection<T>(Graph<T>&, const ParamSet<T>&,                                   \
                                                 const std::vector<const ScaleInputs*>&, Var, int, int) const;    \
  template Var Backbone::embed_inputs<T>(Graph<T>&, const ParamSet<T>&, const std::vector<const ScaleInputs*>&,   \
                                         Var, int, int) const;                                                    \
  template Var Backbone::forward<T>(Graph<T>&, const ParamSet<T>&, const std::vector<const ScaleInputs*>&,        \
                                    const std::vector<ConditionSequence>&) const;                                 \
  template Mat<T> Backbone::forward_scale<T>(const ParamSet<T>&, const std::vector<const ScaleInputs*>&,          \
                                             const std::vector<ConditionSequence>&, int, KvCache<T>*, bool) const;

MSCL_INSTANTIATE_BACKBONE(float)
MSCL_INSTANTIATE_BACKBONE(double)

}  // namespace mscl
