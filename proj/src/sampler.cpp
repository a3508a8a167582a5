#include "mscl/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace mscl {

void GuidanceSpec::validate() const {
  if (!(scale >= 0.0) || !std::isfinite(scale)) throw ConfigError("guidance scale must be >= 0");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("temperature must be > 0");
  if (top_k < 0) throw ConfigError("top_k must be >= 0");
}

int RefinementSchedule::total_steps() const { return std::accumulate(iterations.begin(), iterations.end(), 0); }

void RefinementSchedule::validate(int num_scales) const {
  if (static_cast<int>(iterations.size()) != num_scales)
    throw ConfigError("schedule has " + std::to_string(iterations.size()) + " entries, expected " +
                      std::to_string(num_scales));
  for (int i : iterations)
    if (i < 1) throw ConfigError("schedule entries must be >= 1");
}

RefinementSchedule RefinementSchedule::parse(std::string_view text) {
  RefinementSchedule s;
  s.iterations.clear();
  std::string item;
  std::stringstream in{std::string(text)};
  while (std::getline(in, item, ',')) {
    size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      throw ConfigError("bad schedule entry '" + item + "'");
    }
    if (used != item.size() || v < 1) throw ConfigError("bad schedule entry '" + item + "'");
    s.iterations.push_back(v);
  }
  if (s.iterations.empty()) throw ConfigError("empty schedule");
  return s;
}

std::string RefinementSchedule::to_string() const {
  std::string out;
  for (size_t i = 0; i < iterations.size(); ++i) out += (i ? "," : "") + std::to_string(iterations[i]);
  return out;
}

MatF cfg_logits(const MatF& cond, const MatF& uncond, double s) {
  if (cond.rows() != uncond.rows() || cond.cols() != uncond.cols()) throw ShapeError("cfg_logits: shape mismatch");
  return uncond + static_cast<float>(s) * (cond - uncond);
}

SampledToken sample_row(const Eigen::Ref<const Eigen::RowVectorXf>& logits, double tau, int top_k, double u) {
  const Index v = logits.size();
  if (v == 0) throw ShapeError("sample_row: empty logits");
  const double mx = static_cast<double>(logits.maxCoeff());
  if (tau < kArgmaxTemperature) {
    Index arg = 0;
    logits.maxCoeff(&arg);
    double sum = 0;
    for (Index i = 0; i < v; ++i) sum += std::exp(static_cast<double>(logits(i)) - mx);
    return {static_cast<int>(arg), 1.0 / sum};
  }
  std::vector<double> p(static_cast<size_t>(v));
  for (Index i = 0; i < v; ++i) p[static_cast<size_t>(i)] = std::exp((static_cast<double>(logits(i)) - mx) / tau);
  if (top_k > 0 && top_k < v) {
    std::vector<int> order(static_cast<size_t>(v));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits(a) > logits(b); });
    for (size_t r = static_cast<size_t>(top_k); r < order.size(); ++r) p[static_cast<size_t>(order[r])] = 0.0;
  }
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  const double target = u * total;
  double cum = 0;
  int pick = -1;
  for (Index i = 0; i < v; ++i) {
    cum += p[static_cast<size_t>(i)];
    if (target < cum) {
      pick = static_cast<int>(i);
      break;
    }
  }
  if (pick < 0)
    for (Index i = v - 1; i >= 0; --i)
      if (p[static_cast<size_t>(i)] > 0) {
        pick = static_cast<int>(i);
        break;
      }
  return {pick, p[static_cast<size_t>(pick)] / total};
}

SampledTokens sample_tokens(const MatF& logits, double tau, int top_k, Rng& rng) {
  SampledTokens out;
  for (Index r = 0; r < logits.rows(); ++r) {
    const SampledToken s = sample_row(logits.row(r), tau, top_k, rng.uniform());
    out.tokens.push_back(s.token);
    out.confidence.push_back(s.confidence);
  }
  return out;
}

int remask_count(int length, int iteration, int iterations) {
  if (iterations < 1 || iteration < 1 || iteration > iterations)
    throw ConfigError("remask_count: need 1 <= i <= I");
  if (iteration == iterations) return 0;
  const double c = std::cos(std::numbers::pi / 2.0 * static_cast<double>(iteration) / static_cast<double>(iterations));
  return static_cast<int>(std::floor(static_cast<double>(length) * c));
}

std::vector<int> refine_scale(LogitModel& model, int k, int length, const GuidanceSpec& guidance, int iterations,
                              Rng& rng, const std::vector<int>& fixed_tokens, const std::vector<std::uint8_t>& editable,
                              RefineTrace* trace) {
  guidance.validate();
  if (iterations < 1) throw ConfigError("refine_scale: iterations must be >= 1");
  if (!editable.empty() && static_cast<int>(editable.size()) != length)
    throw ShapeError("refine_scale: editable mask length mismatch");
  if (!fixed_tokens.empty() && static_cast<int>(fixed_tokens.size()) != length)
    throw ShapeError("refine_scale: fixed token length mismatch");

  std::vector<std::uint8_t> committed(static_cast<size_t>(length), 0);
  std::vector<int> tokens(static_cast<size_t>(length), 0);
  int open = length;
  if (!editable.empty()) {
    if (fixed_tokens.empty()) throw ShapeError("refine_scale: retained positions need fixed tokens");
    for (int j = 0; j < length; ++j)
      if (!editable[static_cast<size_t>(j)]) {
        committed[static_cast<size_t>(j)] = 1;
        tokens[static_cast<size_t>(j)] = fixed_tokens[static_cast<size_t>(j)];
        --open;
      }
  }
  std::vector<double> u(static_cast<size_t>(length));
  for (auto& x : u) x = rng.uniform();
  if (open == 0) return tokens;

  const int initial = open;
  std::vector<double> conf(static_cast<size_t>(length), 0.0);
  MatF cond, uncond;
  for (int i = 1; i <= iterations; ++i) {
    const bool guided = model.guided();
    model.logits(k, tokens, committed, &cond, guided ? &uncond : nullptr);
    if (cond.rows() != length) throw ShapeError("refine_scale: model returned wrong row count");
    const MatF logits = guided ? cfg_logits(cond, uncond, guidance.scale) : cond;
    std::vector<int> fresh;
    for (int j = 0; j < length; ++j) {
      if (committed[static_cast<size_t>(j)]) continue;
      const SampledToken s = sample_row(logits.row(j), guidance.temperature, guidance.top_k, u[static_cast<size_t>(j)]);
      tokens[static_cast<size_t>(j)] = s.token;
      conf[static_cast<size_t>(j)] = s.confidence;
      fresh.push_back(j);
    }
    const int remain = remask_count(initial, i, iterations);
    const int commit = std::max(0, static_cast<int>(fresh.size()) - remain);
    std::stable_sort(fresh.begin(), fresh.end(),
                     [&](int a, int b) { return conf[static_cast<size_t>(a)] > conf[static_cast<size_t>(b)]; });
    for (int c = 0; c < commit; ++c) committed[static_cast<size_t>(fresh[static_cast<size_t>(c)])] = 1;
    if (trace) {
      ++trace->steps;
      trace->committed.push_back(committed);
    }
  }
  return tokens;
}

// ---------------------------------------------------------------- backbone model

BackboneLogitModel::BackboneLogitModel(const ModelBundle& bundle, ConditionSequence condition,
                                       const GuidanceSpec& guidance, bool use_cache)
    : bundle_(bundle), use_cache_(use_cache) {
  guidance.validate();
  guided_ = !condition.null && guidance.scale != 1.0;
  conds_.push_back(std::move(condition));
  if (guided_) conds_.push_back(ConditionSequence{{}, true});
  const auto& sc = bundle_.backbone.config.scales;
  std::vector<MatF> zeros(static_cast<size_t>(sc.num_scales()),
                          MatF::Zero(sc.latent_len(), bundle_.backbone.config.latent_dim));
  inputs_ = masked_inputs(zeros, sc);
}

void BackboneLogitModel::begin_scale(int k, const MatF& prefix_accum) {
  inputs_.prefix_accums.at(static_cast<size_t>(k)) = prefix_accum;
}

MatF BackboneLogitModel::run(int k, const std::vector<int>& tokens, const std::vector<std::uint8_t>& visible,
                             KvCache<float>* cache, bool capture) {
  inputs_.tokens.at(static_cast<size_t>(k)) = tokens;
  inputs_.visible.at(static_cast<size_t>(k)) = visible;
  std::vector<const ScaleInputs*> batch(conds_.size(), &inputs_);
  ++forwards_;
  return bundle_.backbone.net.forward_scale<float>(bundle_.backbone.params, batch, conds_, k, cache, capture);
}

void BackboneLogitModel::logits(int k, const std::vector<int>& tokens, const std::vector<std::uint8_t>& visible,
                                MatF* cond, MatF* uncond) {
  MatF out;
  if (!use_cache_) {
    out = run(k, tokens, visible, nullptr, false);
  } else {
    const bool all_masked = std::none_of(visible.begin(), visible.end(), [](std::uint8_t v) { return v != 0; });
    if (all_masked && pending_.scales == k) {
      // Scale-k keys/values go into a copy; the later iterations of this
      // scale still read the k-scale prefix.
      pending_ = cache_;
      out = run(k, tokens, visible, &pending_, true);
    } else {
      out = run(k, tokens, visible, &cache_, false);
    }
  }
  const Index l = static_cast<Index>(tokens.size());
  if (cond) *cond = out.topRows(l);
  if (uncond) {
    if (!guided_) throw ValidationError("null-condition logits requested from an unguided model");
    *uncond = out.middleRows(l, l);
  }
}

void BackboneLogitModel::end_scale(int k, const std::vector<int>& tokens) {
  inputs_.tokens.at(static_cast<size_t>(k)) = tokens;
  std::fill(inputs_.visible.at(static_cast<size_t>(k)).begin(), inputs_.visible.at(static_cast<size_t>(k)).end(), 0);
  if (!use_cache_) return;
  if (pending_.scales == k + 1) {
    cache_ = std::move(pending_);
  } else {
    // No all-MASK pass at this scale (edits): capture it now.
    const auto& l = inputs_.tokens[static_cast<size_t>(k)];
    run(k, l, std::vector<std::uint8_t>(l.size(), 0), &cache_, true);
  }
  pending_ = KvCache<float>{};
  pending_.scales = k + 1;
}

GenerationResult generate(const ModelBundle& bundle, const ConditionSequence& condition, const GuidanceSpec& guidance,
                          const RefinementSchedule& schedule, Rng& rng, const GenerateOptions& options) {
  const auto& sc = bundle.tokenizer.config.scales;
  schedule.validate(sc.num_scales());
  if (sc.lengths != bundle.backbone.config.scales.lengths)
    throw ConfigError("generate: tokenizer and backbone scale configs differ");
  BackboneLogitModel model(bundle, condition, guidance, options.use_cache);
  GenerationResult out;
  MatF accum = MatF::Zero(sc.latent_len(), bundle.tokenizer.config.latent_dim);
  RefineTrace trace;
  for (int k = 0; k < sc.num_scales(); ++k) {
    model.begin_scale(k, accum);
    std::vector<int> z =
        refine_scale(model, k, sc.length(k), guidance, schedule.iterations[static_cast<size_t>(k)], rng, {}, {}, &trace);
    if (k + 1 < sc.num_scales()) model.end_scale(k, z);
    accum = accum + scale_feature(z, sc, bundle.tokenizer.codebook.entries);
    out.hierarchy.tokens.push_back(std::move(z));
  }
  out.steps = trace.steps;
  out.forwards = model.forwards();
  out.frames = decode_latent(bundle.tokenizer, accum);
  out.motion = motion_from_model_frames(out.frames, bundle.tokenizer.stats);
  return out;
}

}  // namespace mscl
