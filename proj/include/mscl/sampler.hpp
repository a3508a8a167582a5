#pragma once

// Coarse-to-fine generation: per scale, iterative mask-and-repredict under a
// cosine schedule with classifier-free guidance in logit space.

#include "mscl/trainer.hpp"

#include <optional>
#include <string_view>

namespace mscl {

struct GuidanceSpec {
  double scale = 5.0;
  double temperature = 1.0;
  int top_k = 0;  // 0 disables truncation

  void validate() const;
  static GuidanceSpec paper() { return {5.0, 1.0, 0}; }
  static GuidanceSpec paper_alt() { return {3.0, 1.0, 0}; }
};

struct RefinementSchedule {
  std::vector<int> iterations{1, 2, 5, 10};

  int total_steps() const;
  void validate(int num_scales) const;
  // "1,2,5,10"
  static RefinementSchedule parse(std::string_view text);
  std::string to_string() const;
};

// uncond + s * (cond - uncond)
MatF cfg_logits(const MatF& cond, const MatF& uncond, double s);

// Temperatures below this take the argmax branch.
inline constexpr double kArgmaxTemperature = 1e-6;

struct SampledToken {
  int token = 0;
  double confidence = 0;  // probability of the drawn token
};

// Inverse-CDF draw from softmax(logits / tau), optionally truncated to the
// top_k largest entries (ties to the lower index), using the uniform u.
SampledToken sample_row(const Eigen::Ref<const Eigen::RowVectorXf>& logits, double tau, int top_k, double u);

struct SampledTokens {
  std::vector<int> tokens;
  std::vector<double> confidence;
};

// One uniform draw per row, in row order.
SampledTokens sample_tokens(const MatF& logits, double tau, int top_k, Rng& rng);

// floor(L * cos(pi/2 * i / I)): positions still masked after iteration i.
int remask_count(int length, int iteration, int iterations);

// Source of per-scale logits; implemented by the backbone and by test stubs.
class LogitModel {
 public:
  virtual ~LogitModel() = default;
  // Whether logits() should also produce the null-condition branch.
  virtual bool guided() const = 0;
  // Called before scale k is refined; prefix_accum sums the committed scales < k.
  virtual void begin_scale(int k, const MatF& prefix_accum) = 0;
  // L_k x V logits for the current scale-k tokens (visible = kept).
  virtual void logits(int k, const std::vector<int>& tokens, const std::vector<std::uint8_t>& visible, MatF* cond,
                      MatF* uncond) = 0;
  virtual void end_scale(int /*k*/, const std::vector<int>& /*tokens*/) {}
};

struct RefineTrace {
  int steps = 0;  // refinement iterations = model invocations
  std::vector<std::vector<std::uint8_t>> committed;  // committed set after each iteration
};

// Refines scale k. Positions with editable[j] = 0 keep fixed_tokens[j] and
// are visible from the start; an empty `editable` means every position is
// generated. The remask schedule runs over the editable positions only.
// L uniforms are drawn from rng up front, one per position, and reused by
// every iteration.
std::vector<int> refine_scale(LogitModel& model, int k, int length, const GuidanceSpec& guidance, int iterations,
                              Rng& rng, const std::vector<int>& fixed_tokens = {},
                              const std::vector<std::uint8_t>& editable = {}, RefineTrace* trace = nullptr);

struct ModelBundle {
  TokenizerModel tokenizer;
  BackboneModel backbone;
};

// LogitModel over the trained backbone. The conditional and null branches
// run as one batch of two; committed scales are presented in their all-MASK
// state, which lets their keys/values be cached.
class BackboneLogitModel : public LogitModel {
 public:
  BackboneLogitModel(const ModelBundle& bundle, ConditionSequence condition, const GuidanceSpec& guidance,
                     bool use_cache);

  bool guided() const override { return guided_; }
  void begin_scale(int k, const MatF& prefix_accum) override;
  void logits(int k, const std::vector<int>& tokens, const std::vector<std::uint8_t>& visible, MatF* cond,
              MatF* uncond) override;
  void end_scale(int k, const std::vector<int>& tokens) override;

  int forwards() const { return forwards_; }

 private:
  MatF run(int k, const std::vector<int>& tokens, const std::vector<std::uint8_t>& visible, KvCache<float>* cache,
           bool capture);

  const ModelBundle& bundle_;
  std::vector<ConditionSequence> conds_;
  bool guided_ = false;
  bool use_cache_ = false;
  KvCache<float> cache_;    // committed scales
  KvCache<float> pending_;  // committed scales plus the current one; scales = k marks it unfilled
  ScaleInputs inputs_;
  int forwards_ = 0;
};

struct GenerationResult {
  ScaleTokenHierarchy hierarchy;
  MatF frames;  // normalized model frames
  MotionSequence motion;
  int steps = 0;
  int forwards = 0;
};

struct GenerateOptions {
  bool use_cache = true;
};

GenerationResult generate(const ModelBundle& bundle, const ConditionSequence& condition, const GuidanceSpec& guidance,
                          const RefinementSchedule& schedule, Rng& rng, const GenerateOptions& options = {});

}  // namespace mscl
