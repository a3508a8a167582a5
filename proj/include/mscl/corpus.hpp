#pragma once

// Synthetic condition-program corpus: a small symbolic grammar that plays
// the role of text, a renderer that turns programs into motion-like
// multichannel signals, and an analytic oracle that reads programs back out
// of a signal.

#include "mscl/common.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mscl {

struct Grammar {
  int num_motifs = 4;
  int max_reps = 3;
  int max_segments = 3;

  void validate() const;

  // Symbol layout: BOS, motif_0..motif_{N-1}, rep_1..rep_R, SEP, EOS.
  int bos() const { return 0; }
  int motif_symbol(int motif) const { return 1 + motif; }
  int rep_symbol(int reps) const { return num_motifs + reps; }
  int sep() const { return 1 + num_motifs + max_reps; }
  int eos() const { return 2 + num_motifs + max_reps; }
  int vocab_size() const { return 3 + num_motifs + max_reps; }
  // Longest encoding: BOS + segments * (motif, rep) + separators + EOS.
  int max_encoding_length() const { return 3 * max_segments + 1; }
};

struct Segment {
  int motif = 0;
  int reps = 1;
  bool operator==(const Segment&) const = default;
};

// Ordered (motif, repetition-count) segments. Adjacent segments never share
// a motif, otherwise the rendering of [(a,1),(a,2)] and [(a,3)] would be
// identical and the oracle could not invert it.
struct ConditionProgram {
  std::vector<Segment> segments;

  bool operator==(const ConditionProgram&) const = default;
  bool empty() const { return segments.empty(); }
  int total_reps() const;

  void validate(const Grammar& grammar) const;
  std::vector<int> encode(const Grammar& grammar) const;
  static ConditionProgram decode(const std::vector<int>& symbols, const Grammar& grammar);

  // Compact text form "m0x2,m3x1".
  std::string to_string() const;
  static ConditionProgram parse(std::string_view text, const Grammar& grammar);
};

ConditionProgram sample_program(Rng& rng, const Grammar& grammar);

struct MotionSequence {
  MatF frames;  // T x D_m
  int valid_len = 0;
  double fps = 20.0;

  Index length() const { return frames.rows(); }
  Index channels() const { return frames.cols(); }
  // Finite entries, 1 <= valid_len <= T, zero padding.
  void validate() const;
};

struct MotifTemplate {
  int motif_id = 0;
  int cycle_len = 16;
  MatF cycle;  // cycle_len x D_m, one repetition
};

// Default library: sine burst, triangle, step-and-return and chirp on
// D_m channels. Channel 0 is the shared repetition marker, a sin^2 bump
// with a single strict peak of height 1 in the middle of every cycle.
class MotifLibrary {
 public:
  MotifLibrary(int num_motifs = 4, int channels = 8, int cycle_len = 16);

  int num_motifs() const { return static_cast<int>(templates_.size()); }
  int channels() const { return channels_; }
  int cycle_len() const { return cycle_len_; }
  int marker_channel() const { return 0; }
  double marker_peak() const { return 1.0; }
  // Frame index of the marker peak within a cycle.
  int peak_offset() const { return cycle_len_ / 2; }
  const MotifTemplate& motif(int id) const { return templates_.at(static_cast<size_t>(id)); }

 private:
  int channels_;
  int cycle_len_;
  std::vector<MotifTemplate> templates_;
};

MotionSequence render_program(const ConditionProgram& program, const MotifLibrary& library, int length_budget,
                              int t_max, double noise_std, Rng& rng, double fps = 20.0);

struct OracleResult {
  ConditionProgram program;
  bool warning = false;  // input too short to hold one cycle
  int peaks = 0;
};

// Reads a program back from denormalized frames: repetition peaks on the
// marker channel, motif identity by matched filtering of the remaining
// channels around each peak, consecutive equal motifs merged into segments.
OracleResult oracle_decode(const MotionSequence& motion, const MotifLibrary& library);

struct NormalizationStats {
  std::vector<float> mean;
  std::vector<float> std;

  static NormalizationStats identity(int channels);
};

enum class NormDirection { forward, inverse };

MotionSequence apply_normalization(const MotionSequence& motion, const NormalizationStats& stats,
                                   NormDirection direction);

struct CorpusSpec {
  Grammar grammar;
  int size = 1000;
  int t_max = 192;
  int channels = 8;
  int cycle_len = 16;
  double noise_std = 0.05;
  double fps = 20.0;

  void validate() const;
};

struct Corpus {
  CorpusSpec spec;
  std::uint64_t seed = 0;
  std::vector<ConditionProgram> programs;
  std::vector<MotionSequence> motions;  // raw (denormalized) frames
  NormalizationStats stats;             // training split only
  std::vector<int> train, val, test;
};

Corpus build_corpus(const CorpusSpec& spec, std::uint64_t seed);
NormalizationStats compute_stats(const std::vector<MotionSequence>& motions, const std::vector<int>& indices);

// Directory layout: meta.json, motions.bin, programs.jsonl.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

// Plain motion sets (generated outputs) share the binary and JSONL layout.
struct MotionSet {
  std::vector<MotionSequence> motions;
  std::vector<std::optional<ConditionProgram>> conditions;
};
void write_motion_set(const MotionSet& set, const std::filesystem::path& dir);
MotionSet read_motion_set(const std::filesystem::path& dir, const Grammar& grammar);

// Atomically replaces `path` with `bytes` (write to a temp file, then rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace mscl
