#include "mscl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace mscl {

namespace {

// Partial Fisher-Yates: `count` distinct positions of [0, n), sorted.
std::vector<int> choose_positions(int n, int count, Rng& rng) {
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < count; ++i) {
    const int j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  idx.resize(static_cast<size_t>(count));
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<std::vector<int>> batches_of(const std::vector<int>& order, int batch) {
  std::vector<std::vector<int>> out;
  for (size_t i = 0; i < order.size(); i += static_cast<size_t>(batch))
    out.emplace_back(order.begin() + static_cast<long>(i),
                     order.begin() + static_cast<long>(std::min(order.size(), i + static_cast<size_t>(batch))));
  return out;
}

}  // namespace

// ---------------------------------------------------------------- models

TokenizerModel TokenizerModel::create(const TokenizerConfig& config, const NormalizationStats& stats,
                                      std::uint64_t seed) {
  config.validate();
  if (static_cast<int>(stats.mean.size()) != config.motion_dim)
    throw ConfigError("tokenizer: normalization stats do not match motion_dim");
  TokenizerModel m;
  m.config = config;
  m.stats = stats;
  Rng rng(derive_seed(seed, 0x70c));
  m.net = TokenizerNet::create(config, m.params, rng);
  m.codebook = Codebook<float>::from_entries(nn::random_matrix(config.codebook_size, config.latent_dim, 1.0, rng),
                                             static_cast<float>(config.ema_decay));
  return m;
}

BackboneModel BackboneModel::create(const BackboneConfig& config, std::uint64_t seed) {
  BackboneModel m;
  m.config = config;
  Rng rng(derive_seed(seed, 0xbb));
  m.net = Backbone::create(config, m.params, rng);
  return m;
}

MatF model_frames(const MotionSequence& motion, const NormalizationStats& stats) {
  const Index d = motion.frames.cols();
  if (static_cast<Index>(stats.mean.size()) != d || static_cast<Index>(stats.std.size()) != d)
    throw ShapeError("model_frames: normalization stats channel mismatch");
  MatF out(motion.frames.rows(), d);
  for (Index t = 0; t < out.rows(); ++t)
    for (Index c = 0; c < d; ++c)
      out(t, c) = (motion.frames(t, c) - stats.mean[static_cast<size_t>(c)]) / stats.std[static_cast<size_t>(c)];
  return out;
}

MotionSequence motion_from_model_frames(const MatF& frames, const NormalizationStats& stats, double fps) {
  const Index d = frames.cols();
  if (static_cast<Index>(stats.mean.size()) != d) throw ShapeError("motion_from_model_frames: channel mismatch");
  MotionSequence m;
  m.frames.resize(frames.rows(), d);
  for (Index t = 0; t < frames.rows(); ++t)
    for (Index c = 0; c < d; ++c)
      m.frames(t, c) = frames(t, c) * stats.std[static_cast<size_t>(c)] + stats.mean[static_cast<size_t>(c)];
  m.valid_len = static_cast<int>(frames.rows());
  m.fps = fps;
  return m;
}

MatF encode_latent(const TokenizerModel& tok, const MatF& frames) {
  Graph<float> g(false);
  return g.value(tok.net.encode(g, tok.params, g.constant(frames)));
}

MatF decode_latent(const TokenizerModel& tok, const MatF& accum) {
  Graph<float> g(false);
  return g.value(tok.net.decode(g, tok.params, g.constant(accum)));
}

MatF tokenizer_round_trip(const TokenizerModel& tok, const MatF& frames) {
  const MatF latent = encode_latent(tok, frames);
  const auto mst = multi_scale_tokenize<float>(latent, tok.config.scales, tok.codebook.entries);
  const auto acc = dequantize<float>(mst.hierarchy, tok.config.scales, tok.codebook.entries, tok.config.scales.num_scales());
  return decode_latent(tok, acc.values);
}

double reconstruction_mse(const TokenizerModel& tok, const std::vector<MatF>& frames) {
  if (frames.empty()) return 0.0;
  std::vector<double> err(frames.size());
  parallel_for(static_cast<int>(frames.size()), [&](int i) {
    const auto& f = frames[static_cast<size_t>(i)];
    err[static_cast<size_t>(i)] = (tokenizer_round_trip(tok, f) - f).squaredNorm() / static_cast<double>(f.size());
  });
  return std::accumulate(err.begin(), err.end(), 0.0) / static_cast<double>(err.size());
}

// ---------------------------------------------------------------- tokenizer training

std::vector<TokenizerEpochMetrics> train_tokenizer(TokenizerModel& tok, const std::vector<MatF>& train_frames,
                                                   const std::vector<MatF>& val_frames,
                                                   const TokenizerTrainConfig& config,
                                                   const std::function<void(const TokenizerEpochMetrics&)>& on_epoch) {
  if (config.epochs < 0 || config.batch < 1) throw ConfigError("tokenizer training: bad epochs or batch size");
  std::vector<TokenizerEpochMetrics> history;
  if (config.epochs == 0 || train_frames.empty()) return history;
  const auto& sc = tok.config.scales;
  const int n = static_cast<int>(train_frames.size());
  Adam<float> opt(tok.params, config.adam);
  Rng reseed_rng(derive_seed(config.seed, 0xdead));

  // Codebook starts from encoder outputs of the first batch.
  {
    Rng init(derive_seed(config.seed, 0xc0de));
    MatF pool(0, tok.config.latent_dim);
    for (int i = 0; i < std::min(n, config.batch); ++i) {
      const MatF f = encode_latent(tok, train_frames[static_cast<size_t>(i)]);
      pool.conservativeResize(pool.rows() + f.rows(), Eigen::NoChange);
      pool.bottomRows(f.rows()) = f;
    }
    MatF entries(tok.config.codebook_size, tok.config.latent_dim);
    for (Index v = 0; v < entries.rows(); ++v)
      entries.row(v) = pool.row(static_cast<Index>(init.uniform_int(static_cast<std::uint64_t>(pool.rows()))));
    tok.codebook = Codebook<float>::from_entries(std::move(entries), static_cast<float>(tok.config.ema_decay));
  }

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)], order[shuffle.uniform_int(static_cast<std::uint64_t>(i + 1))]);

    double loss_sum = 0;
    int steps = 0, reseeded = 0;
    std::vector<char> used(static_cast<size_t>(tok.config.codebook_size), 0);
    double lr = 0;
    for (const auto& batch : batches_of(order, config.batch)) {
      const int b = static_cast<int>(batch.size());
      std::vector<GradSet<float>> grads(static_cast<size_t>(b));
      std::vector<double> losses(static_cast<size_t>(b));
      std::vector<MatF> rows(static_cast<size_t>(b));
      std::vector<std::vector<int>> toks(static_cast<size_t>(b));
      parallel_for(b, [&](int i) {
        const MatF& frames = train_frames[static_cast<size_t>(batch[static_cast<size_t>(i)])];
        Graph<float> g;
        Var m = g.constant(frames);
        Var f = tok.net.encode(g, tok.params, m);
        const auto mst = multi_scale_tokenize<float>(g.value(f), sc, tok.codebook.entries);
        const MatF& fhat = mst.accums.back().values;
        // Straight-through: the decoder sees f_hat, gradients reach f.
        Var dec_in = ops::add(g, f, g.constant(fhat - g.value(f)));
        Var recon = tok.net.decode(g, tok.params, dec_in);
        const auto terms = tokenizer_loss(g, m, recon, f, fhat, static_cast<int>(frames.rows()), sc.latent_len(),
                                          tok.config.weights);
        auto& gs = grads[static_cast<size_t>(i)];
        gs = GradSet<float>(tok.params);
        g.backward(terms.total, &gs);
        losses[static_cast<size_t>(i)] = g.value(terms.total)(0, 0);
        MatF r(sc.total_tokens(), tok.config.latent_dim);
        std::vector<int> t;
        for (int k = 0; k < sc.num_scales(); ++k) {
          r.middleRows(sc.offset(k), sc.length(k)) = mst.targets[static_cast<size_t>(k)];
          const auto& z = mst.hierarchy.tokens[static_cast<size_t>(k)];
          t.insert(t.end(), z.begin(), z.end());
        }
        rows[static_cast<size_t>(i)] = std::move(r);
        toks[static_cast<size_t>(i)] = std::move(t);
      });

      GradSet<float> total(tok.params);
      double batch_loss = 0;
      for (int i = 0; i < b; ++i) {
        total.add(grads[static_cast<size_t>(i)]);
        batch_loss += losses[static_cast<size_t>(i)];
      }
      batch_loss /= b;
      if (!std::isfinite(batch_loss) || !total.all_finite())
        throw NumericError("tokenizer training diverged at epoch " + std::to_string(epoch));
      total.scale(1.0f / static_cast<float>(b));
      lr = opt.step(tok.params, total);

      MatF all(static_cast<Index>(b) * sc.total_tokens(), tok.config.latent_dim);
      std::vector<Assignment> assign;
      for (int i = 0; i < b; ++i) {
        all.middleRows(static_cast<Index>(i) * sc.total_tokens(), sc.total_tokens()) = rows[static_cast<size_t>(i)];
        const auto& t = toks[static_cast<size_t>(i)];
        for (size_t j = 0; j < t.size(); ++j) {
          assign.push_back({t[j], static_cast<Index>(i) * sc.total_tokens() + static_cast<Index>(j)});
          used[static_cast<size_t>(t[j])] = 1;
        }
      }
      tok.codebook = ema_update(tok.codebook, all, assign, static_cast<float>(tok.config.ema_decay));
      reseeded += reseed_dead_codes(tok.codebook, all, tok.config.dead_code_steps, reseed_rng);
      loss_sum += batch_loss;
      ++steps;
    }

    TokenizerEpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / std::max(1, steps);
    m.val_recon_mse = reconstruction_mse(tok, val_frames);
    m.codes_used = static_cast<int>(std::count(used.begin(), used.end(), 1));
    m.reseeded = reseeded;
    m.lr = lr;
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return history;
}

// ---------------------------------------------------------------- corruption and targets

Corruption corrupt_tokens(const std::vector<int>& tokens, double gamma, int vocab, Rng& rng) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("corrupt_tokens: gamma must lie in [0, 1]");
  if (vocab < 1) throw ConfigError("corrupt_tokens: vocab must be positive");
  const int l = static_cast<int>(tokens.size());
  const int count = static_cast<int>(std::floor(gamma * l));
  Corruption c;
  c.tokens = tokens;
  c.positions = choose_positions(l, count, rng);
  for (int p : c.positions) c.tokens[static_cast<size_t>(p)] = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(vocab)));
  return c;
}

CorruptionSpec CorruptionSpec::sample(double gamma_max, int num_scales, Rng& rng) {
  CorruptionSpec s;
  s.gamma_max = gamma_max;
  for (int k = 0; k < num_scales; ++k) s.gammas.push_back(gamma_max * rng.uniform());
  s.validate(num_scales);
  return s;
}

CorruptionSpec CorruptionSpec::none(int num_scales) {
  CorruptionSpec s;
  s.gamma_max = 0.0;
  s.gammas.assign(static_cast<size_t>(num_scales), 0.0);
  return s;
}

void CorruptionSpec::validate(int num_scales) const {
  if (!(gamma_max >= 0.0 && gamma_max <= 1.0)) throw ConfigError("gamma_max must lie in [0, 1]");
  if (static_cast<int>(gammas.size()) != num_scales) throw ConfigError("one corruption ratio per scale required");
  for (double g : gammas)
    if (!(g >= 0.0 && g <= gamma_max)) throw ConfigError("corruption ratio outside [0, gamma_max]");
}

RefinedTargets build_refined_targets(const MatF& latent, const ScaleTokenHierarchy& clean, const CorruptionSpec& spec,
                                     const ScaleConfig& config, const MatF& codebook, Rng& rng) {
  const int k_count = config.num_scales();
  spec.validate(k_count);
  clean.validate(config, static_cast<int>(codebook.rows()));
  if (latent.rows() != config.latent_len() || latent.cols() != codebook.cols())
    throw ShapeError("build_refined_targets: latent shape mismatch");
  RefinedTargets rt;
  MatF accum = MatF::Zero(latent.rows(), latent.cols());
  std::vector<int> target = clean.tokens[0];
  for (int k = 0; k < k_count; ++k) {
    if (k > 0) {
      const MatF residual = resample_time<float>(latent - accum, config.length(k), ResampleMode::down);
      target = quantize_residual(residual, codebook).tokens;
    }
    rt.input_accums.push_back(accum);
    Corruption c = corrupt_tokens(target, spec.gammas[static_cast<size_t>(k)], static_cast<int>(codebook.rows()), rng);
    accum = accum + scale_feature(c.tokens, config, codebook);
    rt.targets.push_back(target);
    rt.corrupted.push_back(std::move(c.tokens));
    rt.corrupted_positions.push_back(std::move(c.positions));
  }
  return rt;
}

std::vector<std::uint8_t> sample_in_scale_mask(int length, Rng& rng, const InScaleMaskPolicy& policy) {
  if (length < 1) throw ConfigError("sample_in_scale_mask: length must be >= 1");
  std::vector<std::uint8_t> visible(static_cast<size_t>(length), 1);
  bool pure = policy.force == InScaleMaskPolicy::Force::pure_ar;
  if (policy.force == InScaleMaskPolicy::Force::none) pure = rng.uniform() < policy.pure_ar_prob;
  if (pure) {
    std::fill(visible.begin(), visible.end(), 0);
    return visible;
  }
  for (int p : choose_positions(length, masked_count(length, rng.uniform()), rng)) visible[static_cast<size_t>(p)] = 0;
  return visible;
}

TrainingExample make_example(const ExampleSource& src, const ScaleConfig& scales, const MatF& codebook,
                             double gamma_max, const InScaleMaskPolicy& policy, Rng& rng) {
  const auto spec = CorruptionSpec::sample(gamma_max, scales.num_scales(), rng);
  RefinedTargets rt = build_refined_targets(*src.latent, *src.clean, spec, scales, codebook, rng);
  TrainingExample ex;
  ex.inputs.prefix_accums = std::move(rt.input_accums);
  for (int k = 0; k < scales.num_scales(); ++k) {
    auto vis = sample_in_scale_mask(scales.length(k), rng, policy);
    std::vector<std::uint8_t> sup(vis.size());
    for (size_t j = 0; j < vis.size(); ++j) sup[j] = vis[j] ? 0 : 1;
    ex.inputs.tokens.push_back(rt.targets[static_cast<size_t>(k)]);
    ex.inputs.visible.push_back(std::move(vis));
    ex.supervised.push_back(std::move(sup));
  }
  ex.targets = std::move(rt.targets);
  ex.condition.symbols = src.condition;
  return ex;
}

template <typename T>
StepResult training_step(const Backbone& net, const ParamSet<T>& params, const std::vector<TrainingExample>& batch,
                         double guidance_drop_prob, Rng& rng, GradSet<T>* grads) {
  if (batch.empty()) throw ValidationError("training_step: empty batch");
  const auto& sc = net.config().scales;
  const SequenceLayout& layout = net.layout();
  StepResult r;
  r.per_scale_loss.assign(static_cast<size_t>(sc.num_scales()), 0.0);
  r.per_scale_count.assign(static_cast<size_t>(sc.num_scales()), 0);
  auto& per_scale_count = r.per_scale_count;

  std::vector<const ScaleInputs*> inputs;
  std::vector<ConditionSequence> conds;
  std::vector<int> targets;
  std::vector<std::uint8_t> supervised;
  for (const auto& ex : batch) {
    const bool drop = rng.uniform() < guidance_drop_prob;
    long count = 0;
    for (const auto& s : ex.supervised) count += std::count(s.begin(), s.end(), 1);
    if (count == 0) {
      std::cerr << "warning: training example without supervised positions skipped\n";
      ++r.skipped;
      continue;
    }
    inputs.push_back(&ex.inputs);
    ConditionSequence c = ex.condition;
    if (drop) {
      c.null = true;
      ++r.nulled;
    }
    conds.push_back(std::move(c));
    for (int k = 0; k < sc.num_scales(); ++k) {
      const auto& t = ex.targets.at(static_cast<size_t>(k));
      const auto& s = ex.supervised.at(static_cast<size_t>(k));
      targets.insert(targets.end(), t.begin(), t.end());
      supervised.insert(supervised.end(), s.begin(), s.end());
    }
  }
  if (inputs.empty()) return r;

  Graph<T> g(grads != nullptr);
  Var logits = net.forward(g, params, inputs, conds);
  long total = 0;
  for (auto s : supervised) total += s;
  Var loss = ops::scale(g, ops::cross_entropy_sum(g, logits, targets, supervised), T(1) / static_cast<T>(total));
  if (grads) g.backward(loss, grads);
  r.loss = static_cast<double>(g.value(loss)(0, 0));
  r.supervised = total;

  const Mat<T>& lv = g.value(logits);
  for (Index row = 0; row < lv.rows(); ++row) {
    if (!supervised[static_cast<size_t>(row)]) continue;
    const int k = layout.scale_of(static_cast<int>(row % layout.total()));
    const auto x = lv.row(row);
    const T mx = x.maxCoeff();
    const T lse = mx + std::log((x.array() - mx).exp().sum());
    const int t = targets[static_cast<size_t>(row)];
    r.per_scale_loss[static_cast<size_t>(k)] += static_cast<double>(lse - x(t));
    ++per_scale_count[static_cast<size_t>(k)];
    Index arg = 0;
    x.maxCoeff(&arg);
    if (arg == t) ++r.correct;
  }
  for (size_t k = 0; k < per_scale_count.size(); ++k)
    if (per_scale_count[k] > 0) r.per_scale_loss[k] /= static_cast<double>(per_scale_count[k]);
  return r;
}

template StepResult training_step<float>(const Backbone&, const ParamSet<float>&, const std::vector<TrainingExample>&,
                                         double, Rng&, GradSet<float>*);
template StepResult training_step<double>(const Backbone&, const ParamSet<double>&,
                                          const std::vector<TrainingExample>&, double, Rng&, GradSet<double>*);

// ---------------------------------------------------------------- backbone training

TrainData prepare_train_data(const TokenizerModel& tok, const std::vector<MotionSequence>& motions,
                             const std::vector<ConditionProgram>& programs, const Grammar& grammar) {
  if (motions.size() != programs.size()) throw ShapeError("prepare_train_data: one program per motion required");
  TrainData d;
  const size_t n = motions.size();
  d.latents.resize(n);
  d.hierarchies.resize(n);
  d.conditions.resize(n);
  parallel_for(static_cast<int>(n), [&](int i) {
    const size_t s = static_cast<size_t>(i);
    d.latents[s] = encode_latent(tok, model_frames(motions[s], tok.stats));
    d.hierarchies[s] = multi_scale_tokenize<float>(d.latents[s], tok.config.scales, tok.codebook.entries).hierarchy;
    d.conditions[s] = programs[s].encode(grammar);
  });
  return d;
}

namespace {

std::vector<TrainingExample> build_batch(const TrainData& data, const std::vector<int>& idx, const ScaleConfig& sc,
                                         const MatF& codebook, const TrainConfig& config, std::uint64_t stream) {
  std::vector<TrainingExample> out(idx.size());
  parallel_for(static_cast<int>(idx.size()), [&](int i) {
    const size_t s = static_cast<size_t>(idx[static_cast<size_t>(i)]);
    Rng rng(derive_seed(stream, static_cast<std::uint64_t>(i)));
    ExampleSource src{&data.latents[s], &data.hierarchies[s], data.conditions[s]};
    out[static_cast<size_t>(i)] = make_example(src, sc, codebook, config.gamma_max, config.mask_policy, rng);
  });
  return out;
}

}  // namespace

StepResult evaluate_backbone(const BackboneModel& model, const MatF& codebook, const TrainData& data,
                             const TrainConfig& config, std::uint64_t seed) {
  StepResult agg;
  const int k = model.config.scales.num_scales();
  agg.per_scale_loss.assign(static_cast<size_t>(k), 0.0);
  std::vector<double> scale_count(static_cast<size_t>(k), 0.0);
  std::vector<int> order(data.latents.size());
  std::iota(order.begin(), order.end(), 0);
  double loss_sum = 0;
  int b = 0;
  for (const auto& idx : batches_of(order, config.batch)) {
    auto batch = build_batch(data, idx, model.config.scales, codebook, config, derive_seed(seed, static_cast<std::uint64_t>(b)));
    Rng rng(derive_seed(seed, 0xe7a1 + static_cast<std::uint64_t>(b)));
    const StepResult r = training_step<float>(model.net, model.params, batch, 0.0, rng, nullptr);
    loss_sum += r.loss * static_cast<double>(r.supervised);
    agg.supervised += r.supervised;
    agg.correct += r.correct;
    for (size_t s = 0; s < r.per_scale_count.size(); ++s) {
      agg.per_scale_loss[s] += r.per_scale_loss[s] * static_cast<double>(r.per_scale_count[s]);
      scale_count[s] += static_cast<double>(r.per_scale_count[s]);
    }
    ++b;
  }
  if (agg.supervised > 0) agg.loss = loss_sum / static_cast<double>(agg.supervised);
  for (size_t s = 0; s < scale_count.size(); ++s)
    if (scale_count[s] > 0) agg.per_scale_loss[s] /= scale_count[s];
  return agg;
}

TrainResult train_backbone(BackboneModel& model, const MatF& codebook, const TrainData& train, const TrainData& val,
                           const TrainConfig& config, const std::function<void(const EpochMetrics&)>& on_epoch) {
  if (config.epochs < 0 || config.batch < 1) throw ConfigError("train: bad epochs or batch size");
  if (!(config.gamma_max >= 0.0 && config.gamma_max <= 1.0)) throw ConfigError("train: gamma_max must lie in [0, 1]");
  if (!(config.guidance_drop >= 0.0 && config.guidance_drop <= 1.0))
    throw ConfigError("train: guidance_drop must lie in [0, 1]");
  TrainResult result;
  if (config.epochs == 0 || train.latents.empty()) return result;

  Adam<float> opt(model.params, config.adam);
  ParamSet<float> best = model.params;
  double best_val = std::numeric_limits<double>::infinity();
  const int n = static_cast<int>(train.latents.size());
  long global_step = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const std::uint64_t epoch_seed = derive_seed(config.seed, static_cast<std::uint64_t>(epoch));
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(derive_seed(epoch_seed, 0x5f));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)], order[shuffle.uniform_int(static_cast<std::uint64_t>(i + 1))]);

    double loss_sum = 0;
    int steps = 0;
    double lr = 0;
    int b = 0;
    for (const auto& idx : batches_of(order, config.batch)) {
      auto batch = build_batch(train, idx, model.config.scales, codebook, config,
                               derive_seed(epoch_seed, 0x1000 + static_cast<std::uint64_t>(b)));
      Rng drop(derive_seed(epoch_seed, 0x2000 + static_cast<std::uint64_t>(b)));
      GradSet<float> grads(model.params);
      const StepResult r = training_step<float>(model.net, model.params, batch, config.guidance_drop, drop, &grads);
      ++b;
      ++global_step;
      if (!std::isfinite(r.loss) || !grads.all_finite()) {
        std::cerr << "warning: loss diverged at epoch " << epoch << " step " << global_step
                  << "; keeping the last good parameters\n";
        model.params = best;
        result.diverged = true;
        return result;
      }
      lr = opt.step(model.params, grads);
      loss_sum += r.loss;
      ++steps;
    }

    const StepResult v = evaluate_backbone(model, codebook, val, config, derive_seed(config.seed, 0x7a1));
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / std::max(1, steps);
    m.val_loss = v.loss;
    m.per_scale_loss = v.per_scale_loss;
    m.masked_acc = v.supervised > 0 ? static_cast<double>(v.correct) / static_cast<double>(v.supervised) : 0.0;
    m.lr = lr;
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
    const double score = val.latents.empty() ? m.train_loss : m.val_loss;
    if (score < best_val) {
      best_val = score;
      best = model.params;
      result.best_epoch = epoch;
    }
  }
  model.params = best;
  return result;
}

}  // namespace mscl
