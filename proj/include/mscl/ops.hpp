#pragma once

// Differentiable operations on Graph variables. All matrices are row-major
// with time (or sequence position) along rows and channels along columns.

#include "mscl/autograd.hpp"

namespace mscl {

// Allowed-attention pattern between query rows and key rows.
struct AttentionMask {
  Index rows = 0;
  Index cols = 0;
  std::vector<std::uint8_t> allowed;

  bool operator()(Index i, Index j) const { return allowed[static_cast<size_t>(i * cols + j)] != 0; }
};

struct ConvSpec {
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  int dilation = 1;

  Index output_length(Index input_length) const {
    return (input_length + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
  }
};

namespace ops {

template <typename T> Var matmul(Graph<T>& g, Var a, Var b);
// x * w (+ b broadcast over rows); b may be an invalid Var.
template <typename T> Var linear(Graph<T>& g, Var x, Var w, Var b);
template <typename T> Var add(Graph<T>& g, Var a, Var b);
template <typename T> Var sub(Graph<T>& g, Var a, Var b);
template <typename T> Var add_row(Graph<T>& g, Var x, Var row);
template <typename T> Var scale(Graph<T>& g, Var x, T s);
template <typename T> Var gelu(Graph<T>& g, Var x);
template <typename T> Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta);

// Multi-head scaled dot-product attention. q is Nq x D, k and v are Nk x D;
// heads split D into contiguous blocks. Disallowed pairs get exactly zero
// weight. A query row with no allowed key is an error. With groups > 1 the
// rows of q and of k/v are split into that many equal contiguous blocks
// (independent sequences of a batch) and the mask applies to each block.
// key_lengths, when given, limits group g to its first key_lengths[g] keys
// (padded condition sequences).
template <typename T>
Var attention(Graph<T>& g, Var q, Var k, Var v, int heads, const AttentionMask* mask, int groups = 1,
              const std::vector<int>* key_lengths = nullptr);

// Rotary embedding on interleaved channel pairs of each head block.
// Row r of pair p is rotated by freqs[p] * positions[r].
template <typename T>
Var rope(Graph<T>& g, Var x, const std::vector<T>& positions, const std::vector<T>& freqs, int heads);

template <typename T> Var concat_cols(Graph<T>& g, Var a, Var b);
template <typename T> Var concat_rows(Graph<T>& g, const std::vector<Var>& parts);
template <typename T> Var slice_rows(Graph<T>& g, Var x, Index start, Index count);
template <typename T> Var gather_rows(Graph<T>& g, Var table, const std::vector<int>& ids);
template <typename T> Var broadcast_rows(Graph<T>& g, Var row, Index n);
// op * x for a constant operator (time resampling, differencing).
template <typename T> Var left_mul(Graph<T>& g, const Mat<T>& op, Var x);
// x: T x Cin, w: (kernel*Cin) x Cout, b: 1 x Cout.
template <typename T> Var conv1d(Graph<T>& g, Var x, Var w, Var b, const ConvSpec& spec);

// Mean squared difference over the first `rows` rows (all columns).
template <typename T> Var masked_mse(Graph<T>& g, Var a, Var b, Index rows);
// Sum over supervised rows of -log softmax(logits)[target].
template <typename T>
Var cross_entropy_sum(Graph<T>& g, Var logits, const std::vector<int>& targets,
                      const std::vector<std::uint8_t>& supervised);
template <typename T> Var sum_all(Graph<T>& g, Var x);
template <typename T> Var stop_gradient(Graph<T>& g, Var x);

}  // namespace ops

// Plain helpers shared with non-differentiable code paths.
template <typename T> Mat<T> softmax_rows(const Mat<T>& logits);
template <typename T> T gelu_value(T x);

}  // namespace mscl
