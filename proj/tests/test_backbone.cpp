#include "gradcheck.hpp"
#include "mscl/backbone.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace mscl;

namespace {

BackboneConfig tiny_config() {
  BackboneConfig c;
  c.blocks = 1;
  c.model_dim = 16;
  c.heads = 2;
  c.vocab = 8;
  c.latent_dim = 4;
  c.scales = {{1, 2, 4}, 4, 16};
  c.cond_vocab = 10;
  c.cond_dim = 8;
  c.cond_max_len = 10;
  return c;
}

MatF random_matf(Index r, Index c, Rng& rng) {
  MatF m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal());
  return m;
}

// Random accumulations, tokens and visibility flags for every scale.
ScaleInputs random_inputs(const BackboneConfig& c, Rng& rng, double visible_prob = 0.5) {
  ScaleInputs in;
  in.prefix_accums.emplace_back(MatF::Zero(c.scales.latent_len(), c.latent_dim));
  for (int k = 1; k < c.scales.num_scales(); ++k) in.prefix_accums.push_back(random_matf(c.scales.latent_len(), c.latent_dim, rng));
  for (int k = 0; k < c.scales.num_scales(); ++k) {
    std::vector<int> z;
    std::vector<std::uint8_t> vis;
    for (int j = 0; j < c.scales.length(k); ++j) {
      z.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(c.vocab))));
      vis.push_back(rng.uniform() < visible_prob ? 1 : 0);
    }
    in.tokens.push_back(z);
    in.visible.push_back(vis);
  }
  return in;
}

ConditionSequence random_condition(const BackboneConfig& c, Rng& rng) {
  ConditionSequence cs;
  const int s = 1 + static_cast<int>(rng.uniform_int(4));
  for (int i = 0; i < s; ++i) cs.symbols.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(c.cond_vocab))));
  return cs;
}

MatF logits_of(const Backbone& net, const ParamSet<float>& ps, const ScaleInputs& in, const ConditionSequence& cond) {
  Graph<float> g(false);
  return g.value(net.forward(g, ps, {&in}, {cond}));
}

ParamId id_of(const ParamSet<float>& ps, const std::string& name) {
  const auto id = ps.find(name);
  if (!id) throw std::runtime_error("no parameter " + name);
  return *id;
}

}  // namespace

TEST(ScaleMask, OneTwoExample) {
  const auto m = build_scale_causal_mask({1, 2});
  ASSERT_EQ(m.rows, 3);
  const std::vector<std::uint8_t> expected{1, 0, 0, 1, 1, 1, 1, 1, 1};
  EXPECT_EQ(m.allowed, expected);
}

TEST(ScaleMask, MatchesScaleMembership) {
  for (const std::vector<int>& lengths : {std::vector<int>{3}, {1, 2, 4}, {2, 1, 3, 2}, {6, 12, 24, 48}}) {
    std::vector<int> scale;
    for (size_t k = 0; k < lengths.size(); ++k) scale.insert(scale.end(), static_cast<size_t>(lengths[k]), static_cast<int>(k));
    const auto m = build_scale_causal_mask(lengths);
    const int n = static_cast<int>(scale.size());
    ASSERT_EQ(m.rows, n);
    ASSERT_EQ(m.cols, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        ASSERT_EQ(m.allowed[static_cast<size_t>(i * n + j)], scale[static_cast<size_t>(j)] <= scale[static_cast<size_t>(i)] ? 1 : 0)
            << i << "," << j;
  }
}

TEST(ScaleMask, SingleScaleFullyBidirectional) {
  const auto m = build_scale_causal_mask({5});
  for (auto a : m.allowed) EXPECT_EQ(a, 1);
}

TEST(ScaleMask, SymmetricWithinScaleBlocks) {
  const std::vector<int> lengths{2, 3, 4};
  const auto m = build_scale_causal_mask(lengths);
  SequenceLayout layout(lengths);
  const int n = layout.total();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (layout.scale_of(i) == layout.scale_of(j)) {
        EXPECT_EQ(m.allowed[static_cast<size_t>(i * n + j)], m.allowed[static_cast<size_t>(j * n + i)]);
      }
}

TEST(ScaleMask, RejectsBadLengths) {
  EXPECT_THROW(build_scale_causal_mask({}), ConfigError);
  EXPECT_THROW(build_scale_causal_mask({2, 0}), ConfigError);
}

TEST(Layout, BijectionAndPositions) {
  SequenceLayout layout({6, 12, 24, 48});
  EXPECT_EQ(layout.total(), 90);
  for (int i = 0; i < layout.total(); ++i) {
    const int k = layout.scale_of(i), j = layout.index_in_scale(i);
    ASSERT_GE(j, 0);
    ASSERT_LT(j, layout.length(k));
    EXPECT_EQ(layout.flat(k, j), i);
    const double p = layout.position(k, j);
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < layout.length(k); ++j) EXPECT_EQ(layout.scale_of(layout.flat(k, j)), k);
  EXPECT_DOUBLE_EQ(layout.position(0, 0), 0.5 / 6);
  EXPECT_DOUBLE_EQ(layout.position(3, 47), 47.5 / 48);
}

TEST(BackboneConfigTest, Presets) {
  const auto d = BackboneConfig::desk();
  EXPECT_EQ(d.blocks, 4);
  EXPECT_EQ(d.model_dim, 128);
  EXPECT_EQ(d.heads, 4);
  const auto p = BackboneConfig::paper();
  EXPECT_EQ(p.blocks, 16);
  EXPECT_EQ(p.model_dim, 768);
  EXPECT_EQ(p.heads, 8);
  EXPECT_NO_THROW(d.validate());
  EXPECT_NO_THROW(p.validate());
}

TEST(BackboneConfigTest, Rejections) {
  auto c = tiny_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.model_dim = 6;  // head dim 3
  EXPECT_THROW(c.validate(), ConfigError);
  ParamSet<float> ps;
  Rng rng(0);
  EXPECT_THROW(Backbone::create(c, ps, rng), ConfigError);
}

TEST(Pooling, SingleSymbolIsProjectionOfEmbedding) {
  ParamSet<float> ps;
  Rng rng(1);
  const auto c = tiny_config();
  const auto net = Backbone::create(c, ps, rng);
  Graph<float> g(false);
  std::vector<int> lengths;
  const ConditionSequence cs{{7}, false};
  Var rows = net.embed_condition(g, ps, {cs}, lengths);
  const MatF pooled = g.value(net.pool_condition(g, ps, rows, lengths));

  const MatF e = ps.value(id_of(ps, "cond.embed")).row(7) + ps.value(id_of(ps, "cond.pos")).row(0);
  const MatF expected = e * ps.value(id_of(ps, "pool.proj.weight")) + ps.value(id_of(ps, "pool.proj.bias"));
  ASSERT_EQ(pooled.rows(), 1);
  ASSERT_EQ(pooled.cols(), c.model_dim);
  EXPECT_LT((pooled - expected).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Pooling, DuplicatedRowsEqualSingleRow) {
  ParamSet<float> ps;
  Rng rng(2);
  const auto net = Backbone::create(tiny_config(), ps, rng);
  const MatF r = random_matf(1, 8, rng);
  Graph<float> g(false);
  MatF two(2, 8);
  two << r, r;
  const MatF a = g.value(net.pool_condition(g, ps, g.constant(r), {1}));
  const MatF b = g.value(net.pool_condition(g, ps, g.constant(two), {2}));
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Pooling, PermutationChangesOutput) {
  ParamSet<float> ps;
  Rng rng(3);
  const auto net = Backbone::create(tiny_config(), ps, rng);
  Graph<float> g(false);
  std::vector<int> la, lb;
  const MatF a = g.value(net.pool_condition(g, ps, net.embed_condition(g, ps, {{{1, 2, 3}, false}}, la), la));
  const MatF b = g.value(net.pool_condition(g, ps, net.embed_condition(g, ps, {{{3, 1, 2}, false}}, lb), lb));
  EXPECT_GT((a - b).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Pooling, PaddingDoesNotLeakAcrossBatch) {
  ParamSet<float> ps;
  Rng rng(4);
  const auto net = Backbone::create(tiny_config(), ps, rng);
  Graph<float> g(false);
  std::vector<int> l1, l2;
  const ConditionSequence short_c{{4}, false}, long_c{{1, 2, 3, 5}, false};
  const MatF alone = g.value(net.pool_condition(g, ps, net.embed_condition(g, ps, {short_c}, l1), l1));
  const MatF batched = g.value(net.pool_condition(g, ps, net.embed_condition(g, ps, {long_c, short_c}, l2), l2));
  EXPECT_LT((alone.row(0) - batched.row(1)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Pooling, GradientMatchesFiniteDifferences) {
  ParamSet<float> fps;
  Rng rng(5);
  const auto net = Backbone::create(tiny_config(), fps, rng);
  ParamSet<double> ps = fps.cast<double>();
  const std::vector<ConditionSequence> conds{{{1, 4, 2}, false}, {{9}, false}};
  const MatD target = MatD::Random(2, 16);
  auto loss = [&](Graph<double>& g, const ParamSet<double>& p) {
    std::vector<int> lengths;
    Var pooled = net.pool_condition(g, p, net.embed_condition(g, p, conds, lengths), lengths);
    return ops::masked_mse(g, pooled, g.constant(target), 2);
  };
  const auto r = test::grad_check(ps, loss, 30, rng, 1e-4, [](const std::string& n) {
    return n.rfind("pool.", 0) == 0 || n.rfind("cond.", 0) == 0;
  });
  EXPECT_EQ(r.checked, 30);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

TEST(Condition, Validation) {
  ParamSet<float> ps;
  Rng rng(6);
  const auto net = Backbone::create(tiny_config(), ps, rng);
  Graph<float> g(false);
  std::vector<int> lengths;
  EXPECT_THROW(net.embed_condition(g, ps, {{{}, false}}, lengths), ValidationError);
  EXPECT_THROW(net.embed_condition(g, ps, {{{10}, false}}, lengths), ValidationError);
  EXPECT_THROW(net.embed_condition(g, ps, {{std::vector<int>(11, 0), false}}, lengths), ValidationError);
  EXPECT_THROW(net.embed_condition(g, ps, {}, lengths), ShapeError);
  // A null condition ignores its symbols, even invalid ones.
  EXPECT_NO_THROW(net.embed_condition(g, ps, {{{99}, true}}, lengths));
  EXPECT_EQ(lengths, std::vector<int>{1});
}

TEST(EmbedInputs, AllMaskedUsesMaskEmbedding) {
  ParamSet<float> ps;
  Rng rng(7);
  const auto c = tiny_config();
  const auto net = Backbone::create(c, ps, rng);
  ScaleInputs in = random_inputs(c, rng, 0.0);
  Graph<float> g(false);
  std::vector<int> lengths;
  Var pooled = net.pool_condition(g, ps, net.embed_condition(g, ps, {{{2}, false}}, lengths), lengths);
  const MatF pre = g.value(net.embed_pre_projection(g, ps, {&in}, pooled, 0, 3));
  ASSERT_EQ(pre.rows(), 7);
  ASSERT_EQ(pre.cols(), 32);
  const MatF mask_row = ps.value(id_of(ps, "tok.embed")).row(c.vocab);
  for (Index r = 0; r < pre.rows(); ++r) EXPECT_EQ(MatF(pre.row(r).rightCols(16)), mask_row) << r;
  // Scale 0 carries the pooled vector.
  EXPECT_EQ(MatF(pre.row(0).leftCols(16)), g.value(pooled));
}

TEST(EmbedInputs, VisibleTokensUseTheirEmbedding) {
  ParamSet<float> ps;
  Rng rng(8);
  const auto c = tiny_config();
  const auto net = Backbone::create(c, ps, rng);
  ScaleInputs in = random_inputs(c, rng, 0.5);
  Graph<float> g(false);
  std::vector<int> lengths;
  Var pooled = net.pool_condition(g, ps, net.embed_condition(g, ps, {{{2}, false}}, lengths), lengths);
  const MatF pre = g.value(net.embed_pre_projection(g, ps, {&in}, pooled, 0, 3));
  const MatF& table = ps.value(id_of(ps, "tok.embed"));
  Index r = 0;
  for (int k = 0; k < 3; ++k)
    for (int j = 0; j < c.scales.length(k); ++j, ++r) {
      const int id = in.visible[static_cast<size_t>(k)][static_cast<size_t>(j)] ? in.tokens[static_cast<size_t>(k)][static_cast<size_t>(j)] : c.vocab;
      EXPECT_EQ(MatF(pre.row(r).rightCols(16)), MatF(table.row(id)));
    }
}

TEST(EmbedInputs, RowLocality) {
  ParamSet<float> ps;
  Rng rng(9);
  const auto c = tiny_config();
  const auto net = Backbone::create(c, ps, rng);
  ScaleInputs a = random_inputs(c, rng, 1.0);
  ScaleInputs b = a;
  for (auto& z : b.tokens[2]) z = (z + 3) % c.vocab;
  Graph<float> g(false);
  std::vector<int> lengths;
  Var pooled = net.pool_condition(g, ps, net.embed_condition(g, ps, {{{2}, false}}, lengths), lengths);
  const MatF xa = g.value(net.embed_inputs(g, ps, {&a}, pooled, 0, 3));
  const MatF xb = g.value(net.embed_inputs(g, ps, {&b}, pooled, 0, 3));
  EXPECT_EQ(MatF(xa.topRows(3)), MatF(xb.topRows(3)));
  EXPECT_GT((xa.bottomRows(4) - xb.bottomRows(4)).cwiseAbs().maxCoeff(), 0.0f);
}

TEST(EmbedInputs, ZeroInputsGiveZeroPreProjection) {
  ParamSet<float> ps;
  Rng rng(10);
  const auto c = tiny_config();
  const auto net = Backbone::create(c, ps, rng);
  ps.value(id_of(ps, "tok.embed")).row(c.vocab).setZero();
  ScaleInputs in = masked_inputs(std::vector<MatF>(3, MatF::Zero(4, 4)), c.scales);
  Graph<float> g(false);
  Var pooled = g.constant(MatF::Zero(1, 16));
  const MatF pre = g.value(net.embed_pre_projection(g, ps, {&in}, pooled, 0, 3));
  EXPECT_EQ(pre.cwiseAbs().maxCoeff(), 0.0f);
}

TEST(EmbedInputs, ShapeErrors) {
  ParamSet<float> ps;
  Rng rng(11);
  const auto c = tiny_config();
  const auto net = Backbone::create(c, ps, rng);
  Graph<float> g(false);
  Var pooled = g.constant(MatF::Zero(1, 16));
  ScaleInputs bad_acc = masked_inputs(std::vector<MatF>(3, MatF::Zero(5, 4)), c.scales);
  EXPECT_THROW(net.embed_pre_projection(g, ps, {&bad_acc}, pooled, 0, 3), ShapeError);
  ScaleInputs bad_tok = masked_inputs(std::vector<MatF>(3, MatF::Zero(4, 4)), c.scales);
  bad_tok.tokens[1].push_back(0);
  EXPECT_THROW(net.embed_pre_projection(g, ps, {&bad_tok}, pooled, 0, 3), ShapeError);
  ScaleInputs ok = masked_inputs(std::vector<MatF>(3, MatF::Zero(4, 4)), c.scales);
  EXPECT_THROW(net.embed_pre_projection(g, ps, {&ok}, Var{}, 0, 3), ShapeError);
  EXPECT_THROW(net.embed_pre_projection(g, ps, {&ok}, pooled, 2, 2), ShapeError);
}

TEST(Rope, ZeroPositionIsIdentity) {
  Rng rng(12);
  const MatD x = MatD::Random(3, 8);
  const auto freqs = nn::rope_frequencies<double>(4, 10000.0, 48.0);
  Graph<double> g(false);
  const MatD y = g.value(ops::rope(g, g.constant(x), {0.0, 0.0, 0.0}, freqs, 2));
  EXPECT_LT((x - y).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Rope, PreservesNormPerHead) {
  Rng rng(13);
  const auto freqs = nn::rope_frequencies<double>(4, 10000.0, 48.0);
  for (int trial = 0; trial < 20; ++trial) {
    MatD x(2, 8);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    Graph<double> g(false);
    const MatD y = g.value(ops::rope(g, g.constant(x), {rng.uniform(), rng.uniform()}, freqs, 2));
    for (Index r = 0; r < 2; ++r)
      for (Index h = 0; h < 2; ++h)
        EXPECT_NEAR(y.row(r).segment(4 * h, 4).norm(), x.row(r).segment(4 * h, 4).norm(), 1e-6);
  }
}

TEST(Rope, DotProductDependsOnlyOnOffset) {
  Rng rng(14);
  const auto freqs = nn::rope_frequencies<double>(8, 10000.0, 48.0);
  for (int trial = 0; trial < 50; ++trial) {
    MatD q(1, 8), k(1, 8);
    for (Index i = 0; i < 8; ++i) {
      q(0, i) = rng.normal();
      k(0, i) = rng.normal();
    }
    const double p1 = rng.uniform(), p2 = rng.uniform(), shift = rng.uniform() - 0.5;
    Graph<double> g(false);
    auto rot = [&](const MatD& v, double p) { return MatD(g.value(ops::rope(g, g.constant(v), {p}, freqs, 1))); };
    const double a = rot(q, p1).row(0).dot(rot(k, p2).row(0));
    const double b = rot(q, p1 + shift).row(0).dot(rot(k, p2 + shift).row(0));
    EXPECT_NEAR(a, b, 1e-6);
  }
}

TEST(Forward, ShapesAndDeterminism) {
  ParamSet<float> ps;
  Rng rng(15);
  const auto c = tiny_config();
  const auto net = Backbone::create(c, ps, rng);
  const ScaleInputs in = random_inputs(c, rng);
  const ConditionSequence cond{{1, 2}, false};
  const MatF a = logits_of(net, ps, in, cond);
  EXPECT_EQ(a.rows(), 7);
  EXPECT_EQ(a.cols(), c.vocab);
  EXPECT_EQ(a, logits_of(net, ps, in, cond));
}

TEST(Forward, NoLeakageFromFinerScales) {
  ParamSet<float> ps;
  Rng rng(16);
  const auto c = tiny_config();
  const auto net = Backbone::create(c, ps, rng);
  SequenceLayout layout(c.scales.lengths);
  for (int trial = 0; trial < 100; ++trial) {
    const ScaleInputs base = random_inputs(c, rng);
    const ConditionSequence cond = random_condition(c, rng);
    const int k = 1 + static_cast<int>(rng.uniform_int(2));
    ScaleInputs perturbed = base;
    for (int s = k; s < c.scales.num_scales(); ++s) {
      perturbed.prefix_accums[static_cast<size_t>(s)] = random_matf(4, 4, rng);
      for (size_t j = 0; j < perturbed.tokens[static_cast<size_t>(s)].size(); ++j) {
        perturbed.tokens[static_cast<size_t>(s)][j] = static_cast<int>(rng.uniform_int(8));
        perturbed.visible[static_cast<size_t>(s)][j] = rng.uniform() < 0.5 ? 1 : 0;
      }
    }
    const MatF a = logits_of(net, ps, base, cond);
    const MatF b = logits_of(net, ps, perturbed, cond);
    const Index rows = layout.offset(k);
    ASSERT_EQ(MatF(a.topRows(rows)), MatF(b.topRows(rows))) << "trial " << trial << " scale " << k;
  }
}

TEST(Forward, AbsolutePositionsBreakFirstScaleSymmetry) {
  Rng rng(17);
  for (bool on : {false, true}) {
    auto c = tiny_config();
    c.scales = {{4, 8}, 4, 32};
    c.absolute_positions = on;
    ParamSet<float> ps;
    const auto net = Backbone::create(c, ps, rng);
    ScaleInputs in = random_inputs(c, rng);
    for (auto& v : in.visible) std::fill(v.begin(), v.end(), 0);
    const MatF logits = logits_of(net, ps, in, random_condition(c, rng));
    // The first scale's 4 rows see identical all-MASK inputs apart from position.
    const MatF rows = logits.topRows(4);
    double spread = 0;
    for (Index r = 1; r < rows.rows(); ++r) spread = std::max(spread, static_cast<double>((rows.row(r) - rows.row(0)).cwiseAbs().maxCoeff()));
    if (on) {
      EXPECT_GT(spread, 1e-3);
    } else {
      EXPECT_LT(spread, 1e-5);
    }
  }
}

TEST(Forward, SoftmaxRowsSumToOne) {
  ParamSet<float> ps;
  Rng rng(17);
  const auto c = tiny_config();
  const auto net = Backbone::create(c, ps, rng);
  const MatF p = softmax_rows<float>(logits_of(net, ps, random_inputs(c, rng), {{3}, false}));
  for (Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0f, 1e-6f);
}

TEST(Forward, NullConditionIgnoresSymbols) {
  ParamSet<float> ps;
  Rng rng(18);
  const auto c = tiny_config();
  const auto net = Backbone::create(c, ps, rng);
  const ScaleInputs in = random_inputs(c, rng);
  const MatF a = logits_of(net, ps, in, {{1, 2, 3}, true});
  const MatF b = logits_of(net, ps, in, {{7}, true});
  EXPECT_EQ(a, b);
  EXPECT_NE(a, logits_of(net, ps, in, {{7}, false}));
}

TEST(Forward, BatchMatchesSingle) {
  ParamSet<float> ps;
  Rng rng(19);
  const auto c = tiny_config();
  const auto net = Backbone::create(c, ps, rng);
  const ScaleInputs a = random_inputs(c, rng), b = random_inputs(c, rng);
  const ConditionSequence ca{{1}, false}, cb{{2, 5, 6}, false};
  Graph<float> g(false);
  const MatF both = g.value(net.forward(g, ps, {&a, &b}, {ca, cb}));
  EXPECT_LT((both.topRows(7) - logits_of(net, ps, a, ca)).cwiseAbs().maxCoeff(), 1e-5);
  EXPECT_LT((both.bottomRows(7) - logits_of(net, ps, b, cb)).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Forward, GradientMatchesFiniteDifferences) {
  ParamSet<float> fps;
  Rng rng(20);
  const auto c = tiny_config();
  const auto net = Backbone::create(c, fps, rng);
  ParamSet<double> ps = fps.cast<double>();
  // Larger output weights so the loss is sensitive to every layer.
  ps.value(*ps.find("out.weight")) *= 20.0;
  const ScaleInputs a = random_inputs(c, rng), b = random_inputs(c, rng);
  const std::vector<ConditionSequence> conds{{{1, 2}, false}, {{4}, true}};
  std::vector<int> targets;
  for (int i = 0; i < 14; ++i) targets.push_back(static_cast<int>(rng.uniform_int(8)));
  const std::vector<std::uint8_t> supervised(14, 1);
  auto loss = [&](Graph<double>& g, const ParamSet<double>& p) {
    return ops::cross_entropy_sum(g, net.forward(g, p, {&a, &b}, conds), targets, supervised);
  };
  const auto r = test::grad_check(ps, loss, 30, rng);
  EXPECT_EQ(r.checked, 30);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

TEST(ForwardScale, UncachedMatchesFullForwardOnMaskedPrefix) {
  ParamSet<float> ps;
  Rng rng(21);
  const auto c = tiny_config();
  const auto net = Backbone::create(c, ps, rng);
  SequenceLayout layout(c.scales.lengths);
  const ScaleInputs in = random_inputs(c, rng);
  const ConditionSequence cond{{3, 3}, false};
  for (int k = 0; k < 3; ++k) {
    // Full forward with every scale before k masked.
    ScaleInputs masked = in;
    for (int s = 0; s < k; ++s) std::fill(masked.visible[static_cast<size_t>(s)].begin(), masked.visible[static_cast<size_t>(s)].end(), 0);
    const MatF full = logits_of(net, ps, masked, cond);
    const MatF part = net.forward_scale(ps, {&in}, {cond}, k, static_cast<KvCache<float>*>(nullptr), false);
    ASSERT_EQ(part.rows(), c.scales.length(k));
    EXPECT_LT((part - full.middleRows(layout.offset(k), c.scales.length(k))).cwiseAbs().maxCoeff(), 1e-5) << k;
  }
}

TEST(ForwardScale, CachedMatchesUncached) {
  ParamSet<float> ps;
  Rng rng(22);
  const auto c = tiny_config();
  const auto net = Backbone::create(c, ps, rng);
  const ScaleInputs a = masked_inputs({MatF::Zero(4, 4), random_matf(4, 4, rng), random_matf(4, 4, rng)}, c.scales);
  const ScaleInputs b = masked_inputs({MatF::Zero(4, 4), random_matf(4, 4, rng), random_matf(4, 4, rng)}, c.scales);
  const std::vector<ConditionSequence> conds{{{1, 2}, false}, {{0}, true}};
  KvCache<float> cache;
  for (int k = 0; k < 3; ++k) {
    const MatF cached = net.forward_scale(ps, {&a, &b}, conds, k, &cache, true);
    const MatF plain = net.forward_scale(ps, {&a, &b}, conds, k, static_cast<KvCache<float>*>(nullptr), false);
    EXPECT_LT((cached - plain).cwiseAbs().maxCoeff(), 1e-5) << k;
    EXPECT_EQ(cache.scales, k + 1);
  }
  EXPECT_EQ(cache.rows_per_group, 7);
}

TEST(ForwardScale, CacheContractErrors) {
  ParamSet<float> ps;
  Rng rng(23);
  const auto c = tiny_config();
  const auto net = Backbone::create(c, ps, rng);
  ScaleInputs in = masked_inputs(std::vector<MatF>(3, MatF::Zero(4, 4)), c.scales);
  const ConditionSequence cond{{1}, false};
  KvCache<float> cache;
  EXPECT_THROW(net.forward_scale(ps, {&in}, {cond}, 1, &cache, true), ValidationError);
  EXPECT_THROW(net.forward_scale(ps, {&in}, {cond}, 0, static_cast<KvCache<float>*>(nullptr), true), ShapeError);
  EXPECT_THROW(net.forward_scale(ps, {&in}, {cond}, 3, static_cast<KvCache<float>*>(nullptr), false), ShapeError);
  in.visible[0][0] = 1;
  EXPECT_THROW(net.forward_scale(ps, {&in}, {cond}, 0, &cache, true), ValidationError);
}

TEST(Forward, NonFiniteNamesBlock) {
  ParamSet<float> ps;
  Rng rng(24);
  auto c = tiny_config();
  c.blocks = 2;
  const auto net = Backbone::create(c, ps, rng);
  ps.value(id_of(ps, "block1.self.q.weight"))(0, 0) = NAN;
  try {
    logits_of(net, ps, random_inputs(c, rng), {{1}, false});
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("backbone.block1"), std::string::npos) << e.what();
  }
}
