#pragma once

// Layer building blocks. A layer only stores parameter ids; the values live
// in a ParamSet so the same architecture can run in float (training) and
// double (gradient checks) by casting the parameter set.

#include "mscl/ops.hpp"

#include <cmath>
#include <string>

namespace mscl::nn {

inline MatF random_matrix(Index rows, Index cols, double std, Rng& rng) {
  MatF m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal() * std);
  return m;
}

struct Linear {
  ParamId w = -1;
  ParamId b = -1;
};

// std <= 0 selects 1/sqrt(fan_in).
inline Linear make_linear(ParamSet<float>& ps, const std::string& name, Index in, Index out, Rng& rng,
                          bool bias = true, double std = -1.0) {
  const double s = std > 0 ? std : 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.w = ps.add(name + ".weight", random_matrix(in, out, s, rng));
  if (bias) l.b = ps.add(name + ".bias", MatF::Zero(1, out));
  return l;
}

template <typename T>
Var apply(Graph<T>& g, const ParamSet<T>& ps, const Linear& l, Var x) {
  Var b = l.b >= 0 ? g.param(ps, l.b) : Var{};
  return ops::linear(g, x, g.param(ps, l.w), b);
}

struct Norm {
  ParamId gamma = -1;
  ParamId beta = -1;
};

inline Norm make_norm(ParamSet<float>& ps, const std::string& name, Index width) {
  Norm n;
  n.gamma = ps.add(name + ".gamma", MatF::Ones(1, width));
  n.beta = ps.add(name + ".beta", MatF::Zero(1, width));
  return n;
}

template <typename T>
Var apply(Graph<T>& g, const ParamSet<T>& ps, const Norm& n, Var x) {
  return ops::layer_norm(g, x, g.param(ps, n.gamma), g.param(ps, n.beta));
}

struct Conv {
  ParamId w = -1;
  ParamId b = -1;
  ConvSpec spec;
};

inline Conv make_conv(ParamSet<float>& ps, const std::string& name, Index cin, Index cout, ConvSpec spec,
                      Rng& rng) {
  Conv c;
  c.spec = spec;
  const double s = 1.0 / std::sqrt(static_cast<double>(cin * spec.kernel));
  c.w = ps.add(name + ".weight", random_matrix(spec.kernel * cin, cout, s, rng));
  c.b = ps.add(name + ".bias", MatF::Zero(1, cout));
  return c;
}

template <typename T>
Var apply(Graph<T>& g, const ParamSet<T>& ps, const Conv& c, Var x) {
  return ops::conv1d(g, x, g.param(ps, c.w), g.param(ps, c.b), c.spec);
}

// Standard rotary frequencies base^(-2p/head_dim), scaled by `scale`.
template <typename T>
std::vector<T> rope_frequencies(Index head_dim, double base, double scale) {
  std::vector<T> f(static_cast<size_t>(head_dim / 2));
  for (Index p = 0; p < head_dim / 2; ++p)
    f[static_cast<size_t>(p)] =
        static_cast<T>(scale * std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(head_dim)));
  return f;
}

struct FeedForward {
  Linear up;
  Linear down;
};

inline FeedForward make_feed_forward(ParamSet<float>& ps, const std::string& name, Index width, Index hidden,
                                     Rng& rng, double std = -1.0) {
  return {make_linear(ps, name + ".fc1", width, hidden, rng, true, std),
          make_linear(ps, name + ".fc2", hidden, width, rng, true, std)};
}

template <typename T>
Var apply(Graph<T>& g, const ParamSet<T>& ps, const FeedForward& f, Var x) {
  return apply(g, ps, f.down, ops::gelu(g, apply(g, ps, f.up, x)));
}

// Pre-norm self-attention + feed-forward with rotary positions; used inside
// the tokenizer encoder and decoder.
struct AttentionBlock {
  Norm norm1;
  Linear q, k, v, o;
  Norm norm2;
  FeedForward ffn;
  int heads = 1;
};

inline AttentionBlock make_attention_block(ParamSet<float>& ps, const std::string& name, Index width, int heads,
                                           Rng& rng) {
  AttentionBlock b;
  b.heads = heads;
  b.norm1 = make_norm(ps, name + ".norm1", width);
  b.q = make_linear(ps, name + ".q", width, width, rng);
  b.k = make_linear(ps, name + ".k", width, width, rng);
  b.v = make_linear(ps, name + ".v", width, width, rng);
  b.o = make_linear(ps, name + ".o", width, width, rng);
  b.norm2 = make_norm(ps, name + ".norm2", width);
  b.ffn = make_feed_forward(ps, name + ".ffn", width, 4 * width, rng);
  return b;
}

template <typename T>
Var apply(Graph<T>& g, const ParamSet<T>& ps, const AttentionBlock& b, Var x) {
  const Index n = g.value(x).rows();
  const Index width = g.value(x).cols();
  std::vector<T> pos(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) pos[static_cast<size_t>(i)] = static_cast<T>(i);
  const auto freqs = rope_frequencies<T>(width / b.heads, 10000.0, 1.0);
  Var h = apply(g, ps, b.norm1, x);
  Var q = ops::rope(g, apply(g, ps, b.q, h), pos, freqs, b.heads);
  Var k = ops::rope(g, apply(g, ps, b.k, h), pos, freqs, b.heads);
  Var v = apply(g, ps, b.v, h);
  x = ops::add(g, x, apply(g, ps, b.o, ops::attention(g, q, k, v, b.heads, nullptr)));
  return ops::add(g, x, apply(g, ps, b.ffn, apply(g, ps, b.norm2, x)));
}

// x + conv1x1(gelu(conv3(gelu(x)))), optionally dilated.
struct ResBlock {
  Conv conv3;
  Conv conv1;
};

inline ResBlock make_res_block(ParamSet<float>& ps, const std::string& name, Index width, int dilation, Rng& rng) {
  ResBlock r;
  r.conv3 = make_conv(ps, name + ".conv3", width, width, ConvSpec{3, 1, dilation, dilation}, rng);
  r.conv1 = make_conv(ps, name + ".conv1", width, width, ConvSpec{1, 1, 0, 1}, rng);
  return r;
}

template <typename T>
Var apply(Graph<T>& g, const ParamSet<T>& ps, const ResBlock& r, Var x) {
  Var h = apply(g, ps, r.conv3, ops::gelu(g, x));
  h = apply(g, ps, r.conv1, ops::gelu(g, h));
  return ops::add(g, x, h);
}

}  // namespace mscl::nn
