#pragma once

// Temporal editing: tokens whose frame cover overlaps an edited interval are
// re-predicted at every scale, all other tokens are kept from the source.

#include "mscl/sampler.hpp"

namespace mscl {

enum class EditMode { inpaint, outpaint, continuation, edit };

EditMode parse_edit_mode(std::string_view text);
const char* edit_mode_name(EditMode mode);

struct FrameInterval {
  int begin = 0;  // inclusive
  int end = 0;    // exclusive

  // "a:b"
  static FrameInterval parse(std::string_view text);
};

struct EditRequest {
  std::optional<MotionSequence> source;  // raw frames
  std::vector<FrameInterval> intervals;
  ConditionSequence condition{{}, true};
  EditMode mode = EditMode::edit;
  GuidanceSpec guidance;
  RefinementSchedule schedule;

  void validate(int t_max) const;
};

// Frames covered by token j of a scale with L tokens over t_max frames.
inline int cover_begin(int j, int length, int t_max) { return j * t_max / length; }
inline int cover_end(int j, int length, int t_max) { return (j + 1) * t_max / length; }

// Per scale, 1 = EDIT, 0 = RETAIN.
std::vector<std::vector<std::uint8_t>> frames_to_token_mask(const std::vector<FrameInterval>& intervals,
                                                            const ScaleConfig& config);

// Iterations for a scale with n_edit of L positions edited: max(1, ceil(I * n_edit / L)).
int edit_iterations(int iterations, int n_edit, int length);

struct EditResult {
  ScaleTokenHierarchy hierarchy;
  ScaleTokenHierarchy source_hierarchy;
  std::vector<std::vector<std::uint8_t>> edit_mask;
  MatF frames;  // normalized
  MotionSequence motion;
  int steps = 0;
};

EditResult edit(const ModelBundle& bundle, const EditRequest& request, Rng& rng, const GenerateOptions& options = {});

}  // namespace mscl
