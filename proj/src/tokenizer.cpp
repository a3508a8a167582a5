#include "mscl/tokenizer.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>

namespace mscl {

int ScaleConfig::total_tokens() const {
  int n = 0;
  for (int l : lengths) n += l;
  return n;
}

int ScaleConfig::offset(int k) const {
  int n = 0;
  for (int i = 0; i < k; ++i) n += lengths.at(static_cast<size_t>(i));
  return n;
}

void ScaleConfig::validate() const {
  if (lengths.empty()) throw ConfigError("scale config: at least one scale required");
  if (downsample < 1 || (downsample & (downsample - 1)) != 0)
    throw ConfigError("scale config: downsample rate must be a power of two");
  if (t_max % downsample != 0) throw ConfigError("scale config: t_max must be divisible by the downsample rate");
  for (size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] < 1) throw ConfigError("scale config: lengths must be positive");
    if (i > 0 && lengths[i] <= lengths[i - 1]) throw ConfigError("scale config: lengths must be strictly increasing");
  }
  if (lengths.back() != latent_len())
    throw ConfigError("scale config: finest length " + std::to_string(lengths.back()) + " must equal latent length " +
                      std::to_string(latent_len()));
}

int bin_start(int j, int length, int latent_len) {
  // round(j * n / L), halves rounded up.
  return (2 * j * latent_len + length) / (2 * length);
}

template <typename T>
Mat<T> resample_operator(Index n, Index target, ResampleMode mode) {
  if (target < 1 || n < 1) throw ShapeError("resample: lengths must be >= 1");
  Mat<T> op = Mat<T>::Zero(target, n);
  if (mode == ResampleMode::down) {
    if (target > n) throw ShapeError("resample down: target longer than input");
    for (Index j = 0; j < target; ++j) {
      const Index e0 = bin_start(static_cast<int>(j), static_cast<int>(target), static_cast<int>(n));
      const Index e1 = bin_start(static_cast<int>(j + 1), static_cast<int>(target), static_cast<int>(n));
      for (Index i = e0; i < e1; ++i) op(j, i) = T(1) / static_cast<T>(e1 - e0);
    }
  } else {
    if (target < n) throw ShapeError("resample up: target shorter than input");
    if (n == 1 || target == 1) {
      op.col(0).setOnes();
      return op;
    }
    for (Index i = 0; i < target; ++i) {
      // Source coordinate i*(n-1)/(target-1), split into integer and fraction exactly.
      const Index num = i * (n - 1);
      const Index i0 = num / (target - 1);
      const Index rem = num % (target - 1);
      if (rem == 0) {
        op(i, i0) = T(1);
      } else {
        const T frac = static_cast<T>(rem) / static_cast<T>(target - 1);
        op(i, i0) = T(1) - frac;
        op(i, i0 + 1) = frac;
      }
    }
  }
  return op;
}

template <typename T>
Mat<T> resample_time(const Mat<T>& x, Index target, ResampleMode mode) {
  return resample_operator<T>(x.rows(), target, mode) * x;
}

template <typename T>
Codebook<T> Codebook<T>::from_entries(Mat<T> entries, T decay) {
  Codebook c;
  c.entries = std::move(entries);
  c.decay = decay;
  c.ema_counts.assign(static_cast<size_t>(c.entries.rows()), T(1));
  c.ema_sums = c.entries * static_cast<T>(1.0 + kEpsilon);
  c.idle_updates.assign(static_cast<size_t>(c.entries.rows()), 0);
  c.validate();
  return c;
}

template <typename T>
void Codebook<T>::validate() const {
  if (entries.rows() < 2) throw ConfigError("codebook needs at least 2 entries");
  if (!entries.allFinite()) throw NumericError("codebook has non-finite entries");
  if (static_cast<Index>(ema_counts.size()) != entries.rows() || ema_sums.rows() != entries.rows() ||
      ema_sums.cols() != entries.cols())
    throw ShapeError("codebook EMA state does not match entries");
  for (T c : ema_counts)
    if (!(c >= T(0))) throw NumericError("codebook EMA count is negative");
}

template <typename T>
Quantized<T> quantize_residual(const Mat<T>& residual, const Mat<T>& codebook) {
  if (residual.cols() != codebook.cols()) throw ShapeError("quantize: residual width does not match codebook");
  Quantized<T> q;
  q.tokens.resize(static_cast<size_t>(residual.rows()));
  q.embeddings.resize(residual.rows(), codebook.cols());
  for (Index r = 0; r < residual.rows(); ++r) {
    int best = 0;
    T best_d = std::numeric_limits<T>::infinity();
    for (Index v = 0; v < codebook.rows(); ++v) {
      const T d = (residual.row(r) - codebook.row(v)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(v);
      }
    }
    q.tokens[static_cast<size_t>(r)] = best;
    q.embeddings.row(r) = codebook.row(best);
  }
  return q;
}

void ScaleTokenHierarchy::validate(const ScaleConfig& config, int vocab) const {
  if (static_cast<int>(tokens.size()) != config.num_scales())
    throw ValidationError("token hierarchy has " + std::to_string(tokens.size()) + " scales, expected " +
                          std::to_string(config.num_scales()));
  for (int k = 0; k < config.num_scales(); ++k) {
    const auto& z = tokens[static_cast<size_t>(k)];
    if (static_cast<int>(z.size()) != config.length(k))
      throw ValidationError("scale " + std::to_string(k) + " has " + std::to_string(z.size()) + " tokens, expected " +
                            std::to_string(config.length(k)));
    for (int t : z)
      if (t < 0 || t >= vocab) throw CorruptionError("token " + std::to_string(t) + " outside the codebook");
  }
}

std::string ScaleTokenHierarchy::to_json() const { return nlohmann::json(tokens).dump(); }

ScaleTokenHierarchy ScaleTokenHierarchy::from_json(const std::string& text) {
  return {nlohmann::json::parse(text).get<std::vector<std::vector<int>>>()};
}

template <typename T>
Mat<T> scale_feature(const std::vector<int>& tokens, const ScaleConfig& config, const Mat<T>& codebook) {
  Mat<T> emb(static_cast<Index>(tokens.size()), codebook.cols());
  for (size_t j = 0; j < tokens.size(); ++j) {
    if (tokens[j] < 0 || tokens[j] >= codebook.rows())
      throw CorruptionError("token " + std::to_string(tokens[j]) + " outside the codebook");
    emb.row(static_cast<Index>(j)) = codebook.row(tokens[j]);
  }
  return resample_time(emb, config.latent_len(), ResampleMode::up);
}

template <typename T>
MultiScaleTokens<T> multi_scale_tokenize(const Mat<T>& latent, const ScaleConfig& config, const Mat<T>& codebook) {
  if (latent.rows() != config.latent_len()) throw ShapeError("tokenize: latent length does not match scale config");
  MultiScaleTokens<T> out;
  Mat<T> accum = Mat<T>::Zero(latent.rows(), latent.cols());
  for (int k = 0; k < config.num_scales(); ++k) {
    Mat<T> target = resample_time<T>(latent - accum, config.length(k), ResampleMode::down);
    Quantized<T> q = quantize_residual(target, codebook);
    accum = accum + resample_time<T>(q.embeddings, config.latent_len(), ResampleMode::up);
    out.hierarchy.tokens.push_back(std::move(q.tokens));
    out.targets.push_back(std::move(target));
    out.accums.push_back({accum, k + 1});
  }
  return out;
}

template <typename T>
AccumulatedFeature<T> dequantize(const ScaleTokenHierarchy& hierarchy, const ScaleConfig& config,
                                 const Mat<T>& codebook, int upto) {
  if (upto < 0 || upto > config.num_scales()) throw ValidationError("dequantize: upto out of range");
  AccumulatedFeature<T> acc{Mat<T>::Zero(config.latent_len(), codebook.cols()), upto};
  for (int k = 0; k < upto; ++k) {
    const auto& z = hierarchy.tokens.at(static_cast<size_t>(k));
    if (static_cast<int>(z.size()) != config.length(k)) throw CorruptionError("dequantize: scale length mismatch");
    acc.values = acc.values + scale_feature(z, config, codebook);
  }
  return acc;
}

template <typename T>
Codebook<T> ema_update(const Codebook<T>& codebook, const Mat<T>& rows, const std::vector<Assignment>& assignments,
                       T decay) {
  const Index v = codebook.entries.rows();
  std::vector<T> counts(static_cast<size_t>(v), T(0));
  Mat<T> sums = Mat<T>::Zero(v, codebook.entries.cols());
  for (const auto& a : assignments) {
    if (a.token < 0 || a.token >= v) throw CorruptionError("ema_update: token outside the codebook");
    counts[static_cast<size_t>(a.token)] += T(1);
    sums.row(a.token) += rows.row(a.row);
  }
  Codebook<T> out = codebook;
  out.decay = decay;
  for (Index i = 0; i < v; ++i) {
    const size_t s = static_cast<size_t>(i);
    out.ema_counts[s] = decay * codebook.ema_counts[s] + (T(1) - decay) * counts[s];
    out.ema_sums.row(i) = decay * codebook.ema_sums.row(i) + (T(1) - decay) * sums.row(i);
    if (out.ema_counts[s] > T(0))
      out.entries.row(i) = out.ema_sums.row(i) / (out.ema_counts[s] + static_cast<T>(Codebook<T>::kEpsilon));
    out.idle_updates[s] = counts[s] > T(0) ? 0 : codebook.idle_updates[s] + 1;
  }
  return out;
}

template <typename T>
int reseed_dead_codes(Codebook<T>& codebook, const Mat<T>& candidates, int threshold, Rng& rng) {
  if (candidates.rows() == 0) return 0;
  int reseeded = 0;
  for (Index i = 0; i < codebook.entries.rows(); ++i) {
    const size_t s = static_cast<size_t>(i);
    if (codebook.idle_updates[s] < threshold) continue;
    const Index r = static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(candidates.rows())));
    codebook.entries.row(i) = candidates.row(r);
    codebook.ema_counts[s] = T(1);
    codebook.ema_sums.row(i) = candidates.row(r) * static_cast<T>(1.0 + Codebook<T>::kEpsilon);
    codebook.idle_updates[s] = 0;
    ++reseeded;
  }
  return reseeded;
}

// ---------------------------------------------------------------- networks

void TokenizerConfig::validate() const {
  scales.validate();
  if (motion_dim < 1 || width < 2 || latent_dim < 1) throw ConfigError("tokenizer: dimensions must be positive");
  if (heads < 1 || width % heads != 0 || (width / heads) % 2 != 0)
    throw ConfigError("tokenizer: width must split into heads of even size");
  if (codebook_size < 2) throw ConfigError("tokenizer: codebook needs at least 2 entries");
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ConfigError("tokenizer: ema_decay must lie in (0, 1)");
}

TokenizerNet TokenizerNet::create(const TokenizerConfig& config, ParamSet<float>& params, Rng& rng,
                                  bool zero_final_projection) {
  config.validate();
  TokenizerNet net;
  net.config_ = config;
  int stages = 0;
  for (int r = config.scales.downsample; r > 1; r /= 2) ++stages;
  const Index c = config.width;
  net.enc_in_ = nn::make_linear(params, "enc.in", config.motion_dim, c, rng);
  for (int s = 0; s < stages; ++s) {
    const std::string p = "enc.stage" + std::to_string(s);
    DownStage st;
    st.conv = nn::make_conv(params, p + ".down", c, c, ConvSpec{4, 2, 1, 1}, rng);
    st.res = nn::make_res_block(params, p + ".res", c, 1, rng);
    st.attn = nn::make_attention_block(params, p + ".attn", c, config.heads, rng);
    net.enc_stages_.push_back(st);
  }
  net.enc_norm_ = nn::make_norm(params, "enc.norm", c);
  net.enc_out_ = nn::make_linear(params, "enc.out", c, config.latent_dim, rng);
  if (zero_final_projection) {
    params.value(net.enc_out_.w).setZero();
    params.value(net.enc_out_.b).setZero();
  }
  net.dec_in_ = nn::make_linear(params, "dec.in", config.latent_dim, c, rng);
  for (int s = 0; s < stages; ++s) {
    const std::string p = "dec.stage" + std::to_string(s);
    UpStage st;
    st.res = nn::make_res_block(params, p + ".res", c, 3, rng);
    st.conv = nn::make_conv(params, p + ".conv", c, c, ConvSpec{3, 1, 1, 1}, rng);
    st.attn = nn::make_attention_block(params, p + ".attn", c, config.heads, rng);
    net.dec_stages_.push_back(st);
  }
  net.dec_norm_ = nn::make_norm(params, "dec.norm", c);
  net.dec_out_ = nn::make_linear(params, "dec.out", c, config.motion_dim, rng);
  return net;
}

template <typename T>
Var TokenizerNet::encode(Graph<T>& g, const ParamSet<T>& ps, Var motion) const {
  const Mat<T>& m = g.value(motion);
  if (m.rows() % config_.scales.downsample != 0)
    throw ShapeError("encode: sequence length not divisible by the downsample rate");
  if (m.cols() != config_.motion_dim) throw ShapeError("encode: motion channel count mismatch");
  Var x = nn::apply(g, ps, enc_in_, motion);
  for (size_t s = 0; s < enc_stages_.size(); ++s) {
    x = nn::apply(g, ps, enc_stages_[s].conv, x);
    x = nn::apply(g, ps, enc_stages_[s].res, x);
    // Checked before attention so a bad value is reported with its stage.
    require_finite(g.value(x), "encoder.stage" + std::to_string(s) + ".conv");
    x = nn::apply(g, ps, enc_stages_[s].attn, x);
    require_finite(g.value(x), "encoder.stage" + std::to_string(s) + ".attn");
  }
  x = nn::apply(g, ps, enc_out_, nn::apply(g, ps, enc_norm_, x));
  require_finite(g.value(x), "encoder.out");
  return x;
}

template <typename T>
Var TokenizerNet::decode(Graph<T>& g, const ParamSet<T>& ps, Var accum) const {
  if (g.value(accum).cols() != config_.latent_dim) throw ShapeError("decode: latent width mismatch");
  Var x = nn::apply(g, ps, dec_in_, accum);
  for (size_t s = 0; s < dec_stages_.size(); ++s) {
    x = nn::apply(g, ps, dec_stages_[s].res, x);
    const Index n = g.value(x).rows();
    Mat<T> up = Mat<T>::Zero(2 * n, n);
    for (Index i = 0; i < 2 * n; ++i) up(i, i / 2) = T(1);
    x = ops::left_mul(g, up, x);
    x = nn::apply(g, ps, dec_stages_[s].conv, x);
    require_finite(g.value(x), "decoder.stage" + std::to_string(s) + ".conv");
    x = nn::apply(g, ps, dec_stages_[s].attn, x);
    require_finite(g.value(x), "decoder.stage" + std::to_string(s) + ".attn");
  }
  x = nn::apply(g, ps, dec_out_, nn::apply(g, ps, dec_norm_, x));
  require_finite(g.value(x), "decoder.out");
  return x;
}

template <typename T>
TokenizerLossTerms<T> tokenizer_loss(Graph<T>& g, Var motion, Var reconstruction, Var latent,
                                     const Mat<T>& quantized, int valid_frames, int valid_latent,
                                     const TokenizerLossWeights& weights) {
  TokenizerLossTerms<T> t;
  t.reconstruction = ops::masked_mse(g, reconstruction, motion, valid_frames);
  if (valid_frames >= 2) {
    const Index n = g.value(motion).rows();
    Mat<T> diff = Mat<T>::Zero(n - 1, n);
    for (Index i = 0; i + 1 < n; ++i) {
      diff(i, i) = T(-1);
      diff(i, i + 1) = T(1);
    }
    t.feature = ops::masked_mse(g, ops::left_mul(g, diff, reconstruction), ops::left_mul(g, diff, motion),
                                valid_frames - 1);
  } else {
    t.feature = g.constant(Mat<T>::Zero(1, 1));
  }
  t.commitment = ops::masked_mse(g, latent, g.constant(quantized), valid_latent);
  t.total = ops::add(g, ops::scale(g, t.reconstruction, static_cast<T>(weights.reconstruction)),
                     ops::add(g, ops::scale(g, t.feature, static_cast<T>(weights.feature)),
                              ops::scale(g, t.commitment, static_cast<T>(weights.commitment))));
  return t;
}

#define MSCL_INSTANTIATE_TOKENIZER(T)                                                                          \
  template Mat<T> resample_operator<T>(Index, Index, ResampleMode);                                           \
  template Mat<T> resample_time<T>(const Mat<T>&, Index, ResampleMode);                                       \
  template struct Codebook<T>;                                                                                \
  template Quantized<T> quantize_residual<T>(const Mat<T>&, const Mat<T>&);                                   \
  template Mat<T> scale_feature<T>(const std::vector<int>&, const ScaleConfig&, const Mat<T>&);               \
  template MultiScaleTokens<T> multi_scale_tokenize<T>(const Mat<T>&, const ScaleConfig&, const Mat<T>&);     \
  template AccumulatedFeature<T> dequantize<T>(const ScaleTokenHierarchy&, const ScaleConfig&, const Mat<T>&, \
                                               int);                                                          \
  template Codebook<T> ema_update<T>(const Codebook<T>&, const Mat<T>&, const std::vector<Assignment>&, T);   \
  template int reseed_dead_codes<T>(Codebook<T>&, const Mat<T>&, int, Rng&);                                  \
  template Var TokenizerNet::encode<T>(Graph<T>&, const ParamSet<T>&, Var) const;                             \
  template Var TokenizerNet::decode<T>(Graph<T>&, const ParamSet<T>&, Var) const;                             \
  template TokenizerLossTerms<T> tokenizer_loss<T>(Graph<T>&, Var, Var, Var, const Mat<T>&, int, int,         \
                                                   const TokenizerLossWeights&);

MSCL_INSTANTIATE_TOKENIZER(float)
MSCL_INSTANTIATE_TOKENIZER(double)

}  // namespace mscl
