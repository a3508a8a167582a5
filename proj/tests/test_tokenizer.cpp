#include "gradcheck.hpp"
#include "reference.hpp"
#include "mscl/tokenizer.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace mscl;
using namespace mscl::test;

namespace {

MatD random_mat(Index r, Index c, Rng& rng, double scale = 1.0) {
  MatD m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

MatD column(std::initializer_list<double> v) {
  MatD m(static_cast<Index>(v.size()), 1);
  Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}


TokenizerConfig tiny_config() {
  TokenizerConfig c;
  c.motion_dim = 3;
  c.width = 8;
  c.heads = 2;
  c.latent_dim = 4;
  c.codebook_size = 8;
  c.scales = {{1, 2, 4}, 4, 16};
  return c;
}

}  // namespace

TEST(Resample, IdentityAtSameLength) {
  Rng rng(1);
  const MatD x = random_mat(7, 3, rng);
  EXPECT_EQ(resample_time(x, 7, ResampleMode::down), x);
  EXPECT_EQ(resample_time(x, 7, ResampleMode::up), x);
}

TEST(Resample, HandExamples) {
  const MatD d = resample_time(column({0, 1, 2, 3}), 2, ResampleMode::down);
  EXPECT_DOUBLE_EQ(d(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(d(1, 0), 2.5);
  const MatD u = resample_time(column({0, 2}), 3, ResampleMode::up);
  EXPECT_DOUBLE_EQ(u(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(u(1, 0), 1.0);
  EXPECT_DOUBLE_EQ(u(2, 0), 2.0);
}

TEST(Resample, MatchesIndependentOperators) {
  Rng rng(2);
  for (auto [n, t] : std::vector<std::pair<Index, Index>>{{48, 6}, {48, 12}, {48, 24}, {49, 6}, {49, 24}, {10, 3}}) {
    const MatD x = random_mat(n, 2, rng);
    EXPECT_LT((resample_time(x, t, ResampleMode::down) - ref_down(x, t)).cwiseAbs().maxCoeff(), 1e-12);
    const MatD y = random_mat(t, 2, rng);
    EXPECT_LT((resample_time(y, n, ResampleMode::up) - ref_up(y, n)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Resample, BadTargets) {
  const MatD x = column({1, 2, 3});
  EXPECT_THROW(resample_time(x, 0, ResampleMode::down), ShapeError);
  EXPECT_THROW(resample_time(x, 0, ResampleMode::up), ShapeError);
  EXPECT_THROW(resample_time(x, 4, ResampleMode::down), ShapeError);
  EXPECT_THROW(resample_time(x, 2, ResampleMode::up), ShapeError);
}

TEST(Quantize, ExactEntry) {
  Rng rng(3);
  const MatD book = random_mat(32, 5, rng);
  const auto q = quantize_residual<double>(MatD(book.row(17)), book);
  EXPECT_EQ(q.tokens, std::vector<int>{17});
  EXPECT_EQ(q.embeddings, MatD(book.row(17)));
}

TEST(Quantize, NearestAndTieBreak) {
  MatD book(2, 2);
  book << 0, 0, 1, 1;
  MatD rows(2, 2);
  rows << 0.4, 0.4, 0.5, 0.5;
  const auto q = quantize_residual<double>(rows, book);
  EXPECT_EQ(q.tokens, (std::vector<int>{0, 0}));
  MatD swapped(2, 2);
  swapped << 1, 1, 0, 0;
  EXPECT_EQ(quantize_residual<double>(MatD(rows.row(1)), swapped).tokens, std::vector<int>{0});
  MatD twins(3, 2);
  twins << 5, 5, 0.5, 0.5, 0.5, 0.5;
  EXPECT_EQ(quantize_residual<double>(MatD(rows.row(1)), twins).tokens, std::vector<int>{1});
}

TEST(MultiScale, DeskTokenCounts) {
  const ScaleConfig sc = ScaleConfig::desk();
  EXPECT_EQ(sc.latent_len(), 48);
  EXPECT_EQ(sc.total_tokens(), 90);
  Rng rng(4);
  const MatD book = random_mat(16, 4, rng);
  const auto t = multi_scale_tokenize<double>(random_mat(48, 4, rng), sc, book);
  ASSERT_EQ(t.hierarchy.tokens.size(), 4u);
  for (int k = 0; k < 4; ++k) EXPECT_EQ(static_cast<int>(t.hierarchy.tokens[static_cast<size_t>(k)].size()), sc.length(k));
  EXPECT_NO_THROW(t.hierarchy.validate(sc, 16));
}

TEST(MultiScale, SingleScaleIsIdentity) {
  Rng rng(5);
  const ScaleConfig sc{{12}, 4, 48};
  const MatD f = random_mat(12, 3, rng);
  const MatD book = random_mat(9, 3, rng);
  const auto t = multi_scale_tokenize<double>(f, sc, book);
  EXPECT_EQ(t.targets[0], f);
  MatD lookup(12, 3);
  for (int j = 0; j < 12; ++j) lookup.row(j) = book.row(t.hierarchy.tokens[0][static_cast<size_t>(j)]);
  EXPECT_EQ(t.accums[0].values, lookup);
}

TEST(MultiScale, MatchesFromScratchDerivation) {
  Rng rng(6);
  const ScaleConfig sc = ScaleConfig::desk();
  for (int trial = 0; trial < 50; ++trial) {
    const MatD f = random_mat(48, 4, rng);
    const MatD book = random_mat(24, 4, rng, 0.7);
    const auto t = multi_scale_tokenize<double>(f, sc, book);
    MatD acc = MatD::Zero(48, 4);
    for (int k = 0; k < 4; ++k) {
      const MatD target = ref_down(f - acc, sc.length(k));
      const auto tokens = ref_argmin(target, book);
      ASSERT_EQ(t.hierarchy.tokens[static_cast<size_t>(k)], tokens);
      ASSERT_LT((t.targets[static_cast<size_t>(k)] - target).cwiseAbs().maxCoeff(), 1e-9);
      MatD look(sc.length(k), 4);
      for (int j = 0; j < sc.length(k); ++j) look.row(j) = book.row(tokens[static_cast<size_t>(j)]);
      acc += ref_up(look, 48);
      ASSERT_LT((t.accums[static_cast<size_t>(k)].values - acc).cwiseAbs().maxCoeff(), 1e-9);
      EXPECT_NEAR((f - t.accums[static_cast<size_t>(k)].values).norm(), (f - acc).norm(), 1e-9);
    }
  }
}

TEST(Dequantize, TelescopingAndAdditivity) {
  Rng rng(7);
  const ScaleConfig sc = ScaleConfig::desk();
  for (int trial = 0; trial < 50; ++trial) {
    const MatF f = random_mat(48, 6, rng).cast<float>();
    const MatF book = random_mat(32, 6, rng).cast<float>();
    const auto t = multi_scale_tokenize<float>(f, sc, book);
    EXPECT_TRUE(dequantize<float>(t.hierarchy, sc, book, 0).values.isZero(0.0f));
    const auto full = dequantize<float>(t.hierarchy, sc, book, 4);
    EXPECT_LT((full.values - t.accums[3].values).cwiseAbs().maxCoeff(), 1e-6f);
    for (int k = 1; k <= 4; ++k) {
      const MatF prev = dequantize<float>(t.hierarchy, sc, book, k - 1).values;
      const MatF cur = dequantize<float>(t.hierarchy, sc, book, k).values;
      EXPECT_EQ(cur, MatF(prev + scale_feature<float>(t.hierarchy.tokens[static_cast<size_t>(k - 1)], sc, book)));
    }
  }
}

TEST(Dequantize, RejectsBadInput) {
  Rng rng(8);
  const ScaleConfig sc = ScaleConfig::desk();
  const MatF book = random_mat(4, 2, rng).cast<float>();
  ScaleTokenHierarchy h;
  for (int k = 0; k < 4; ++k) h.tokens.emplace_back(static_cast<size_t>(sc.length(k)), 0);
  h.tokens[2][3] = 4;
  EXPECT_THROW(dequantize<float>(h, sc, book, 4), CorruptionError);
  EXPECT_THROW(dequantize<float>(h, sc, book, 5), ValidationError);
}

TEST(Hierarchy, JsonRoundTrip) {
  ScaleTokenHierarchy h{{{1, 2}, {3, 4, 5, 6}}};
  EXPECT_EQ(ScaleTokenHierarchy::from_json(h.to_json()), h);
}

TEST(Codebook, EmptyAssignmentsBarelyDrift) {
  Rng rng(9);
  auto cb = Codebook<double>::from_entries(random_mat(8, 4, rng), 0.99);
  const MatD start = cb.entries;
  for (int s = 0; s < 10; ++s) {
    const MatD before = cb.entries;
    cb = ema_update<double>(cb, MatD(0, 4), {}, 0.99);
    EXPECT_LT((cb.entries - before).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Codebook, ConvergesToAssignedValue) {
  Rng rng(10);
  auto cb = Codebook<double>::from_entries(random_mat(8, 4, rng, 0.5), 0.99);
  const MatD c = random_mat(1, 4, rng, 0.5);
  const Index n = 1024;
  MatD rows = c.replicate(n, 1);
  std::vector<Assignment> asg;
  for (Index r = 0; r < n; ++r) asg.push_back({3, r});
  const MatD e0 = cb.entries.row(3);
  for (int s = 0; s < 100; ++s) cb = ema_update<double>(cb, rows, asg, 0.99);
  // Geometric series: counts and sums after 100 updates from (1, e0 (1 + eps)).
  const double keep = std::pow(0.99, 100);
  const double count = keep + (1 - keep) * n;
  const MatD sum = keep * e0 * (1 + 1e-5) + (1 - keep) * n * c;
  const MatD expect = sum / (count + 1e-5);
  EXPECT_LT((cb.entries.row(3) - expect).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((cb.entries.row(3) - c).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Codebook, ZeroDecayTakesBatchMean) {
  Rng rng(11);
  auto cb = Codebook<double>::from_entries(random_mat(4, 3, rng), 0.99);
  const MatD rows = random_mat(6, 3, rng);
  std::vector<Assignment> asg;
  for (Index r = 0; r < 6; ++r) asg.push_back({r < 4 ? 1 : 2, r});
  cb = ema_update<double>(cb, rows, asg, 0.0);
  const MatD mean1 = rows.topRows(4).colwise().mean();
  const MatD mean2 = rows.bottomRows(2).colwise().mean();
  EXPECT_LT((cb.entries.row(1) - mean1).cwiseAbs().maxCoeff(), 1e-5);
  EXPECT_LT((cb.entries.row(2) - mean2).cwiseAbs().maxCoeff(), 1e-5);
  EXPECT_EQ(cb.idle_updates[0], 1);
  EXPECT_EQ(cb.idle_updates[1], 0);
}

TEST(Codebook, DeadCodesAreReseeded) {
  Rng rng(12);
  auto cb = Codebook<double>::from_entries(random_mat(4, 2, rng), 0.99);
  const MatD rows = random_mat(5, 2, rng);
  std::vector<Assignment> asg;
  for (Index r = 0; r < 5; ++r) asg.push_back({0, r});
  for (int s = 0; s < 3; ++s) cb = ema_update<double>(cb, rows, asg, 0.99);
  const MatD candidates = random_mat(7, 2, rng);
  EXPECT_EQ(reseed_dead_codes<double>(cb, candidates, 4, rng), 0);
  EXPECT_EQ(reseed_dead_codes<double>(cb, candidates, 3, rng), 3);
  for (Index i = 1; i < 4; ++i) {
    bool found = false;
    for (Index r = 0; r < 7; ++r) found = found || cb.entries.row(i) == candidates.row(r);
    EXPECT_TRUE(found);
    EXPECT_EQ(cb.idle_updates[static_cast<size_t>(i)], 0);
  }
}

TEST(TokenizerNet, ShapesAndZeroProjection) {
  TokenizerConfig cfg;
  ParamSet<float> ps;
  Rng rng(13);
  const auto net = TokenizerNet::create(cfg, ps, rng);
  Graph<float> g(false);
  const Var x = g.constant(random_mat(192, 8, rng).cast<float>());
  const Var f = net.encode(g, ps, x);
  EXPECT_EQ(g.value(f).rows(), 48);
  EXPECT_EQ(g.value(f).cols(), 64);
  const Var m = net.decode(g, ps, f);
  EXPECT_EQ(g.value(m).rows(), 192);
  EXPECT_EQ(g.value(m).cols(), 8);

  ParamSet<float> zps;
  const auto zero = TokenizerNet::create(cfg, zps, rng, true);
  Graph<float> h(false);
  EXPECT_TRUE(h.value(zero.encode(h, zps, h.constant(random_mat(192, 8, rng).cast<float>()))).isZero(0.0f));
}

TEST(TokenizerNet, NonFiniteInputNamesTheStage) {
  ParamSet<float> ps;
  Rng rng(14);
  const auto net = TokenizerNet::create(tiny_config(), ps, rng);
  Graph<float> g(false);
  MatF x = MatF::Zero(16, 3);
  x(3, 1) = NAN;
  try {
    net.encode(g, ps, g.constant(x));
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.stage0"), std::string::npos) << e.what();
  }
}

TEST(TokenizerGrad, Encoder) {
  ParamSet<float> fps;
  Rng rng(15);
  const auto net = TokenizerNet::create(tiny_config(), fps, rng);
  ParamSet<double> ps = fps.cast<double>();
  const MatD x = random_mat(16, 3, rng);
  const MatD target = random_mat(4, 4, rng);
  auto loss = [&](Graph<double>& g, const ParamSet<double>& p) {
    return ops::masked_mse(g, net.encode(g, p, g.constant(x)), g.constant(target), 4);
  };
  const auto r = test::grad_check(ps, loss, 30, rng);
  EXPECT_EQ(r.checked, 30);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

TEST(TokenizerGrad, Decoder) {
  ParamSet<float> fps;
  Rng rng(16);
  const auto net = TokenizerNet::create(tiny_config(), fps, rng);
  ParamSet<double> ps = fps.cast<double>();
  const MatD acc = random_mat(4, 4, rng);
  const MatD target = random_mat(16, 3, rng);
  auto loss = [&](Graph<double>& g, const ParamSet<double>& p) {
    return ops::masked_mse(g, net.decode(g, p, g.constant(acc)), g.constant(target), 16);
  };
  const auto r = test::grad_check(ps, loss, 30, rng);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

TEST(TokenizerGrad, LossThroughBothNetworks) {
  ParamSet<float> fps;
  Rng rng(17);
  const auto net = TokenizerNet::create(tiny_config(), fps, rng);
  ParamSet<double> ps = fps.cast<double>();
  const MatD x = random_mat(16, 3, rng);
  const MatD quant = random_mat(4, 4, rng);
  auto loss = [&](Graph<double>& g, const ParamSet<double>& p) {
    const Var m = g.constant(x);
    const Var f = net.encode(g, p, m);
    return tokenizer_loss(g, m, net.decode(g, p, f), f, quant, 16, 4, TokenizerLossWeights{}).total;
  };
  const auto r = test::grad_check(ps, loss, 30, rng);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

TEST(TokenizerLoss, GradientWithRespectToInputs) {
  Rng rng(18);
  ParamSet<double> ps;
  const ParamId rec = ps.add("reconstruction", random_mat(16, 3, rng));
  const ParamId lat = ps.add("latent", random_mat(4, 4, rng));
  const MatD m = random_mat(16, 3, rng);
  const MatD quant = random_mat(4, 4, rng);
  auto loss = [&](Graph<double>& g, const ParamSet<double>& p) {
    return tokenizer_loss(g, g.constant(m), g.param(p, rec), g.param(p, lat), quant, 13, 4,
                          TokenizerLossWeights{1.0, 0.5, 0.25})
        .total;
  };
  const auto r = test::grad_check(ps, loss, 40, rng);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

TEST(TokenizerLoss, HandValues) {
  Rng rng(19);
  const MatD m = random_mat(16, 3, rng);
  const MatD f = random_mat(4, 4, rng);
  {
    Graph<double> g(false);
    const auto t = tokenizer_loss(g, g.constant(m), g.constant(m), g.constant(f), f, 16, 4, TokenizerLossWeights{});
    EXPECT_EQ(g.value(t.total)(0, 0), 0.0);
  }
  {
    Graph<double> g(false);
    const MatD shifted = (m.array() + 1.0).matrix();
    const auto t = tokenizer_loss(g, g.constant(m), g.constant(shifted), g.constant(f), f, 16, 4,
                                  TokenizerLossWeights{2.0, 0.0, 0.0});
    EXPECT_NEAR(g.value(t.total)(0, 0), 2.0, 1e-12);
  }
}

TEST(TokenizerLoss, CommitmentDoesNotReachTheQuantizedSide) {
  Rng rng(20);
  ParamSet<double> ps;
  const ParamId book = ps.add("codebook", random_mat(6, 4, rng));
  const ParamId lat = ps.add("latent", random_mat(4, 4, rng));
  Graph<double> g;
  // Quantized side built from the codebook and stopped, as the trainer does.
  const Var q = ops::stop_gradient(g, ops::gather_rows(g, g.param(ps, book), {0, 3, 3, 5}));
  const Var diff = ops::sub(g, g.param(ps, lat), q);
  const Var l = ops::sum_all(g, ops::masked_mse(g, diff, g.constant(MatD::Zero(4, 4)), 4));
  GradSet<double> grads(ps);
  g.backward(l, &grads);
  EXPECT_TRUE(grads[book].isZero(0.0));
  EXPECT_FALSE(grads[lat].isZero(0.0));
}
