#include "mscl/corpus.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <cstring>

using namespace mscl;

namespace {

const Grammar kGrammar{4, 3, 3};

// Every program with up to `max_segments` segments and distinct neighbours.
std::vector<ConditionProgram> all_programs(const Grammar& g, int max_segments) {
  std::vector<ConditionProgram> out;
  std::vector<ConditionProgram> frontier{ConditionProgram{}};
  for (int s = 0; s < max_segments; ++s) {
    std::vector<ConditionProgram> next;
    for (const auto& p : frontier)
      for (int m = 0; m < g.num_motifs; ++m) {
        if (!p.segments.empty() && p.segments.back().motif == m) continue;
        for (int r = 1; r <= g.max_reps; ++r) {
          ConditionProgram q = p;
          q.segments.push_back({m, r});
          next.push_back(q);
          out.push_back(q);
        }
      }
    frontier = std::move(next);
  }
  return out;
}

int count_strict_peaks(const MotionSequence& m, int channel, double threshold) {
  int n = 0;
  for (Index t = 0; t < m.valid_len; ++t) {
    const double v = m.frames(t, channel);
    const double prev = t > 0 ? m.frames(t - 1, channel) : -1e9;
    const double next = t + 1 < m.valid_len ? m.frames(t + 1, channel) : -1e9;
    if (v > threshold && v > prev && v > next) ++n;
  }
  return n;
}

}  // namespace

TEST(Program, SameSeedGivesSameProgram) {
  Rng a(7), b(7);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(sample_program(a, kGrammar), sample_program(b, kGrammar));
}

TEST(Program, SingleMotifGrammarRejected) {
  Rng rng(1);
  EXPECT_THROW(sample_program(rng, Grammar{1, 3, 3}), ConfigError);
  EXPECT_THROW(sample_program(rng, Grammar{4, 0, 3}), ConfigError);
  EXPECT_THROW(sample_program(rng, Grammar{4, 3, 0}), ConfigError);
}

TEST(Program, MotifFrequenciesAreUniform) {
  const Grammar g{4, 3, 1};
  Rng rng(11);
  std::array<int, 4> counts{};
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto p = sample_program(rng, g);
    ASSERT_EQ(p.segments.size(), 1u);
    ++counts[static_cast<size_t>(p.segments[0].motif)];
  }
  const double expect = n / 4.0, sigma = std::sqrt(n * 0.25 * 0.75);
  double chi2 = 0;
  for (int c : counts) {
    EXPECT_LT(std::abs(c - expect), 3 * sigma);
    chi2 += (c - expect) * (c - expect) / expect;
  }
  EXPECT_LT(chi2, 16.27);  // chi-square, 3 dof, p = 0.001
}

TEST(Program, SegmentCountAndNeighbours) {
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    const auto p = sample_program(rng, kGrammar);
    ASSERT_GE(p.segments.size(), 1u);
    ASSERT_LE(p.segments.size(), 3u);
    for (size_t s = 1; s < p.segments.size(); ++s) EXPECT_NE(p.segments[s].motif, p.segments[s - 1].motif);
    EXPECT_NO_THROW(p.validate(kGrammar));
  }
}

TEST(Program, EncodingRoundTripsExhaustively) {
  for (const auto& p : all_programs(kGrammar, 3)) {
    const auto sym = p.encode(kGrammar);
    EXPECT_EQ(sym.front(), kGrammar.bos());
    EXPECT_EQ(sym.back(), kGrammar.eos());
    EXPECT_LE(static_cast<int>(sym.size()), kGrammar.max_encoding_length());
    for (int s : sym) {
      EXPECT_GE(s, 0);
      EXPECT_LT(s, kGrammar.vocab_size());
    }
    EXPECT_EQ(ConditionProgram::decode(sym, kGrammar), p);
  }
}

TEST(Program, TextFormRoundTrips) {
  const auto p = ConditionProgram::parse("m0x2,m3x1", kGrammar);
  ASSERT_EQ(p.segments.size(), 2u);
  EXPECT_EQ(p.segments[0], (Segment{0, 2}));
  EXPECT_EQ(p.segments[1], (Segment{3, 1}));
  EXPECT_EQ(p.to_string(), "m0x2,m3x1");
  for (const auto& q : all_programs(kGrammar, 2)) EXPECT_EQ(ConditionProgram::parse(q.to_string(), kGrammar), q);
}

TEST(Program, ParserRejectsBadText) {
  for (const char* bad : {"m0x4", "m0x0", "m4x1", "m0", "x2", "m0x2,", "m0x1,m0x1", "m0x1,m1x1,m2x1,m3x1", ""})
    EXPECT_THROW(ConditionProgram::parse(bad, kGrammar), ValidationError) << bad;
}

TEST(Render, TwoRepetitionsGiveTwoMarkerPeaks) {
  const MotifLibrary lib;
  Rng rng(0);
  const auto m = render_program(ConditionProgram::parse("m0x2", kGrammar), lib, 192, 192, 0.0, rng);
  EXPECT_GE(m.valid_len, 32);
  EXPECT_EQ(count_strict_peaks(m, lib.marker_channel(), 0.5 * lib.marker_peak()), 2);
}

TEST(Render, FirstCycleIsTheTemplate) {
  const MotifLibrary lib;
  Rng rng(0);
  const auto m = render_program(ConditionProgram::parse("m0x1,m1x1", kGrammar), lib, 64, 192, 0.0, rng);
  EXPECT_EQ(MatF(m.frames.topRows(16)), lib.motif(0).cycle);
  EXPECT_EQ(MatF(m.frames.middleRows(16, 16)), lib.motif(1).cycle);
}

TEST(Render, PaddingIsZeroAndBudgetChecked) {
  const MotifLibrary lib;
  Rng rng(2);
  const auto m = render_program(ConditionProgram::parse("m1x3", kGrammar), lib, 100, 192, 0.05, rng);
  EXPECT_EQ(m.valid_len, 100);
  EXPECT_TRUE(m.frames.bottomRows(92).isZero(0.0));
  EXPECT_NO_THROW(m.validate());
  EXPECT_THROW(render_program(ConditionProgram::parse("m1x3", kGrammar), lib, 40, 192, 0.0, rng), RenderError);
  EXPECT_THROW(render_program(ConditionProgram::parse("m1x3", kGrammar), lib, 200, 192, 0.0, rng), RenderError);
}

TEST(Render, MarkerHasOneStrictPeakPerCycle) {
  const MotifLibrary lib;
  for (int id = 0; id < lib.num_motifs(); ++id) {
    MotionSequence one;
    one.frames = lib.motif(id).cycle;
    one.valid_len = lib.cycle_len();
    EXPECT_EQ(count_strict_peaks(one, lib.marker_channel(), 0.0), 1) << id;
  }
}

TEST(Oracle, RecoversNoisyRender) {
  const MotifLibrary lib;
  Rng rng(5);
  const auto p = ConditionProgram::parse("m2x3", kGrammar);
  const auto m = render_program(p, lib, 192, 192, 0.05, rng);
  EXPECT_EQ(oracle_decode(m, lib).program, p);
}

TEST(Oracle, ExactOnAllCleanRendersUpToTwoSegments) {
  const MotifLibrary lib;
  Rng rng(0);
  for (const auto& p : all_programs(kGrammar, 2)) {
    const auto m = render_program(p, lib, 192, 192, 0.0, rng);
    EXPECT_EQ(oracle_decode(m, lib).program, p) << p.to_string();
  }
}

TEST(Oracle, ExactOnSampledCleanRenders) {
  const MotifLibrary lib;
  Rng rng(21);
  for (int i = 0; i < 200; ++i) {
    const auto p = sample_program(rng, kGrammar);
    const int budget = p.total_reps() * lib.cycle_len() + static_cast<int>(rng.uniform_int(20));
    const auto m = render_program(p, lib, budget, 192, 0.0, rng);
    ASSERT_EQ(oracle_decode(m, lib).program, p) << p.to_string();
  }
}

TEST(Oracle, NoiseSweepRecoveryRate) {
  const MotifLibrary lib;
  Rng rng(99);
  int exact = 0;
  for (int i = 0; i < 500; ++i) {
    const auto p = sample_program(rng, kGrammar);
    exact += oracle_decode(render_program(p, lib, 192, 192, 0.1, rng), lib).program == p;
  }
  EXPECT_GE(exact / 500.0, 0.99);
}

TEST(Oracle, DegenerateInputs) {
  const MotifLibrary lib;
  MotionSequence zeros{MatF::Zero(192, 8), 192, 20.0};
  EXPECT_TRUE(oracle_decode(zeros, lib).program.empty());
  MotionSequence shorty{MatF::Zero(192, 8), 10, 20.0};
  const auto r = oracle_decode(shorty, lib);
  EXPECT_TRUE(r.program.empty());
  EXPECT_TRUE(r.warning);
}

TEST(Normalization, HandArithmetic) {
  NormalizationStats s{std::vector<float>(8, 1.0f), std::vector<float>(8, 2.0f)};
  MotionSequence m{MatF::Constant(4, 8, 3.0f), 4, 20.0};
  const auto n = apply_normalization(m, s, NormDirection::forward);
  EXPECT_TRUE(n.frames.isApprox(MatF::Constant(4, 8, 1.0f)));
}

TEST(Normalization, IdentityAndInverse) {
  Rng rng(4);
  MotionSequence m{MatF::Zero(20, 8), 15, 20.0};
  for (Index t = 0; t < 15; ++t)
    for (Index c = 0; c < 8; ++c) m.frames(t, c) = static_cast<float>(rng.normal() * 3.0);
  const auto id = apply_normalization(m, NormalizationStats::identity(8), NormDirection::forward);
  EXPECT_EQ(id.frames, m.frames);
  NormalizationStats s;
  for (int c = 0; c < 8; ++c) {
    s.mean.push_back(static_cast<float>(rng.normal()));
    s.std.push_back(static_cast<float>(0.5 + rng.uniform()));
  }
  const auto back =
      apply_normalization(apply_normalization(m, s, NormDirection::forward), s, NormDirection::inverse);
  EXPECT_LT((back.frames - m.frames).cwiseAbs().maxCoeff(), 1e-5f);
  const auto fwd = apply_normalization(m, s, NormDirection::forward);
  EXPECT_TRUE(fwd.frames.bottomRows(5).isZero(0.0));
  EXPECT_THROW(apply_normalization(m, NormalizationStats::identity(3), NormDirection::forward), ShapeError);
}

TEST(Corpus, SplitsAndStats) {
  CorpusSpec spec;
  spec.size = 1000;
  const Corpus c = build_corpus(spec, 0);
  EXPECT_EQ(c.train.size(), 800u);
  EXPECT_EQ(c.val.size(), 150u);
  EXPECT_EQ(c.test.size(), 50u);
  for (float s : c.stats.std) EXPECT_GE(s, 1e-6f);
  const auto again = compute_stats(c.motions, c.train);
  EXPECT_EQ(again.mean, c.stats.mean);
  for (const auto& m : c.motions) {
    EXPECT_TRUE(m.frames.bottomRows(m.length() - m.valid_len).isZero(0.0));
    const auto back = apply_normalization(apply_normalization(m, c.stats, NormDirection::forward), c.stats,
                                          NormDirection::inverse);
    ASSERT_LT((back.frames - m.frames).cwiseAbs().maxCoeff(), 1e-5f);
  }
}

TEST(Corpus, SameSeedIsByteIdentical) {
  test::TempDir dir("corpus");
  CorpusSpec spec;
  spec.size = 50;
  write_corpus(build_corpus(spec, 3), dir / "a");
  write_corpus(build_corpus(spec, 3), dir / "b");
  for (const char* f : {"meta.json", "motions.bin", "programs.jsonl"})
    EXPECT_EQ(read_file(dir / "a" / f), read_file(dir / "b" / f)) << f;
  write_corpus(build_corpus(spec, 4), dir / "c");
  EXPECT_NE(read_file(dir / "a" / "motions.bin"), read_file(dir / "c" / "motions.bin"));
}

TEST(Corpus, FileRoundTrip) {
  test::TempDir dir("corpus_rt");
  CorpusSpec spec;
  spec.size = 30;
  const Corpus c = build_corpus(spec, 9);
  write_corpus(c, dir.path());
  const Corpus r = read_corpus(dir.path());
  EXPECT_EQ(r.programs, c.programs);
  EXPECT_EQ(r.train, c.train);
  EXPECT_EQ(r.stats.std, c.stats.std);
  ASSERT_EQ(r.motions.size(), c.motions.size());
  for (size_t i = 0; i < c.motions.size(); ++i) {
    EXPECT_EQ(r.motions[i].frames, c.motions[i].frames);
    EXPECT_EQ(r.motions[i].valid_len, c.motions[i].valid_len);
  }
  const std::string bin = read_file(dir / "motions.bin");
  ASSERT_GE(bin.size(), 12u);
  std::uint32_t header[3];
  std::memcpy(header, bin.data(), 12);
  EXPECT_EQ(header[0], 30u);
  EXPECT_EQ(header[1], 192u);
  EXPECT_EQ(header[2], 8u);
  EXPECT_EQ(bin.size(), 12u + 30u * 192u * 8u * 4u);
}

TEST(Corpus, GroundTruthOracleRate) {
  CorpusSpec spec;
  spec.size = 200;
  const Corpus c = build_corpus(spec, 1);
  const MotifLibrary lib(spec.grammar.num_motifs, spec.channels, spec.cycle_len);
  int exact = 0;
  for (size_t i = 0; i < c.motions.size(); ++i) exact += oracle_decode(c.motions[i], lib).program == c.programs[i];
  EXPECT_GE(exact, 198);
}
