#include "mscl/ops.hpp"

#include <cmath>
#include <limits>

namespace mscl {

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

namespace {

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(M_PI));
  return cdf + x * pdf;
}

void require(bool cond, const char* what) {
  if (!cond) throw ShapeError(what);
}

}  // namespace

template <typename T>
Mat<T> softmax_rows(const Mat<T>& logits) {
  Mat<T> out(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const T mx = logits.row(r).maxCoeff();
    T sum = 0;
    for (Index c = 0; c < logits.cols(); ++c) {
      out(r, c) = std::exp(logits(r, c) - mx);
      sum += out(r, c);
    }
    out.row(r) /= sum;
  }
  return out;
}

namespace ops {

template <typename T>
Var matmul(Graph<T>& g, Var a, Var b) {
  const Mat<T>& av = g.value(a);
  const Mat<T>& bv = g.value(b);
  require(av.cols() == bv.rows(), "matmul: inner dimensions differ");
  Mat<T> y = av * bv;
  return g.emit(std::move(y), {a, b}, [a, b](Graph<T>& gr, Var self) {
    const Mat<T>& gy = gr.grad(self);
    if (gr.needs_grad(a)) gr.grad_ref(a).noalias() += gy * gr.value(b).transpose();
    if (gr.needs_grad(b)) gr.grad_ref(b).noalias() += gr.value(a).transpose() * gy;
  });
}

template <typename T>
Var linear(Graph<T>& g, Var x, Var w, Var b) {
  const Mat<T>& xv = g.value(x);
  const Mat<T>& wv = g.value(w);
  require(xv.cols() == wv.rows(), "linear: input width does not match weight");
  Mat<T> y = xv * wv;
  if (b.valid()) {
    const Mat<T>& bv = g.value(b);
    require(bv.rows() == 1 && bv.cols() == wv.cols(), "linear: bias shape");
    y.rowwise() += bv.row(0);
  }
  std::vector<Var> parents{x, w};
  if (b.valid()) parents.push_back(b);
  return g.emit(std::move(y), parents, [x, w, b](Graph<T>& gr, Var self) {
    const Mat<T>& gy = gr.grad(self);
    if (gr.needs_grad(x)) gr.grad_ref(x).noalias() += gy * gr.value(w).transpose();
    if (gr.needs_grad(w)) gr.grad_ref(w).noalias() += gr.value(x).transpose() * gy;
    if (b.valid() && gr.needs_grad(b)) gr.grad_ref(b) += gy.colwise().sum();
  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const Mat<T>& av = g.value(a);
  const Mat<T>& bv = g.value(b);
  require(av.rows() == bv.rows() && av.cols() == bv.cols(), "add: shape mismatch");
  Mat<T> y = av + bv;
  return g.emit(std::move(y), {a, b}, [a, b](Graph<T>& gr, Var self) {
    const Mat<T>& gy = gr.grad(self);
    if (gr.needs_grad(a)) gr.grad_ref(a) += gy;
    if (gr.needs_grad(b)) gr.grad_ref(b) += gy;
  });
}

template <typename T>
Var sub(Graph<T>& g, Var a, Var b) {
  const Mat<T>& av = g.value(a);
  const Mat<T>& bv = g.value(b);
  require(av.rows() == bv.rows() && av.cols() == bv.cols(), "sub: shape mismatch");
  Mat<T> y = av - bv;
  return g.emit(std::move(y), {a, b}, [a, b](Graph<T>& gr, Var self) {
    const Mat<T>& gy = gr.grad(self);
    if (gr.needs_grad(a)) gr.grad_ref(a) += gy;
    if (gr.needs_grad(b)) gr.grad_ref(b) -= gy;
  });
}

template <typename T>
Var add_row(Graph<T>& g, Var x, Var row) {
  const Mat<T>& xv = g.value(x);
  const Mat<T>& rv = g.value(row);
  require(rv.rows() == 1 && rv.cols() == xv.cols(), "add_row: shape mismatch");
  Mat<T> y = xv;
  y.rowwise() += rv.row(0);
  return g.emit(std::move(y), {x, row}, [x, row](Graph<T>& gr, Var self) {
    const Mat<T>& gy = gr.grad(self);
    if (gr.needs_grad(x)) gr.grad_ref(x) += gy;
    if (gr.needs_grad(row)) gr.grad_ref(row) += gy.colwise().sum();
  });
}

template <typename T>
Var scale(Graph<T>& g, Var x, T s) {
  Mat<T> y = g.value(x) * s;
  return g.emit(std::move(y), {x}, [x, s](Graph<T>& gr, Var self) {
    gr.grad_ref(x) += gr.grad(self) * s;
  });
}

template <typename T>
Var gelu(Graph<T>& g, Var x) {
  Mat<T> y = g.value(x).unaryExpr([](T v) { return gelu_value(v); });
  return g.emit(std::move(y), {x}, [x](Graph<T>& gr, Var self) {
    const Mat<T>& xv = gr.value(x);
    gr.grad_ref(x) += gr.grad(self).cwiseProduct(xv.unaryExpr([](T v) { return gelu_grad(v); }));
  });
}

template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta) {
  constexpr T eps = T(1e-5);
  const Mat<T>& xv = g.value(x);
  const Mat<T>& gv = g.value(gamma);
  const Mat<T>& bv = g.value(beta);
  const Index n = xv.rows();
  const Index c = xv.cols();
  require(gv.cols() == c && bv.cols() == c, "layer_norm: affine width");
  Mat<T> xhat(n, c);
  std::vector<T> inv(static_cast<size_t>(n));
  for (Index r = 0; r < n; ++r) {
    const T mean = xv.row(r).mean();
    const T var = (xv.row(r).array() - mean).square().mean();
    const T iv = T(1) / std::sqrt(var + eps);
    inv[static_cast<size_t>(r)] = iv;
    xhat.row(r) = (xv.row(r).array() - mean) * iv;
  }
  Mat<T> y = xhat.array().rowwise() * gv.row(0).array();
  y.rowwise() += bv.row(0);
  return g.emit(std::move(y), {x, gamma, beta},
                [x, gamma, beta, xhat = std::move(xhat), inv = std::move(inv)](Graph<T>& gr, Var self) {
                  const Mat<T>& gy = gr.grad(self);
                  if (gr.needs_grad(gamma)) gr.grad_ref(gamma) += gy.cwiseProduct(xhat).colwise().sum();
                  if (gr.needs_grad(beta)) gr.grad_ref(beta) += gy.colwise().sum();
                  if (!gr.needs_grad(x)) return;
                  const Mat<T>& gv2 = gr.value(gamma);
                  Mat<T>& gx = gr.grad_ref(x);
                  const Index cols = xhat.cols();
                  for (Index r = 0; r < xhat.rows(); ++r) {
                    const auto dxhat = (gy.row(r).array() * gv2.row(0).array()).matrix();
                    const T s1 = dxhat.sum();
                    const T s2 = dxhat.dot(xhat.row(r));
                    gx.row(r).array() += inv[static_cast<size_t>(r)] / T(cols) *
                                         (T(cols) * dxhat.array() - s1 - xhat.row(r).array() * s2);
                  }
                });
}

template <typename T>
Var attention(Graph<T>& g, Var q, Var k, Var v, int heads, const AttentionMask* mask, int groups,
              const std::vector<int>* key_lengths) {
  const Mat<T>& qv = g.value(q);
  const Mat<T>& kv = g.value(k);
  const Mat<T>& vv = g.value(v);
  const Index d = qv.cols();
  require(kv.cols() == d && vv.cols() == d && vv.rows() == kv.rows(), "attention: shape mismatch");
  require(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
  require(groups > 0 && qv.rows() % groups == 0 && kv.rows() % groups == 0, "attention: rows not divisible by groups");
  const Index nq = qv.rows() / groups;
  const Index nk = kv.rows() / groups;
  if (mask) require(mask->rows == nq && mask->cols == nk, "attention: mask shape");
  if (key_lengths) require(static_cast<int>(key_lengths->size()) == groups, "attention: one key length per group");
  const Index dh = d / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));

  Mat<T> out(qv.rows(), d);
  std::vector<Mat<T>> probs(static_cast<size_t>(heads * groups));
  for (int gi = 0; gi < groups; ++gi) {
    const Index q0 = gi * nq, k0 = gi * nk;
    const Index kn = key_lengths ? static_cast<Index>((*key_lengths)[static_cast<size_t>(gi)]) : nk;
    for (int h = 0; h < heads; ++h) {
      Mat<T> s = (qv.block(q0, h * dh, nq, dh) * kv.block(k0, h * dh, nk, dh).transpose()) * sc;
      if (!s.allFinite()) throw NumericError("attention: non-finite scores");
      for (Index i = 0; i < nq; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Index j = 0; j < nk; ++j)
          if (j < kn && (!mask || (*mask)(i, j))) mx = std::max(mx, s(i, j));
        if (mx == -std::numeric_limits<T>::infinity()) throw ShapeError("attention: query row with no allowed key");
        T sum = 0;
        for (Index j = 0; j < nk; ++j) {
          if (j < kn && (!mask || (*mask)(i, j))) {
            s(i, j) = std::exp(s(i, j) - mx);
            sum += s(i, j);
          } else {
            s(i, j) = T(0);
          }
        }
        s.row(i) /= sum;
      }
      out.block(q0, h * dh, nq, dh).noalias() = s * vv.block(k0, h * dh, nk, dh);
      probs[static_cast<size_t>(gi * heads + h)] = std::move(s);
    }
  }

  return g.emit(std::move(out), {q, k, v},
                [q, k, v, heads, groups, nq, nk, dh, sc, probs = std::move(probs)](Graph<T>& gr, Var self) {
    const Mat<T>& gy = gr.grad(self);
    const Mat<T>& qv2 = gr.value(q);
    const Mat<T>& kv2 = gr.value(k);
    const Mat<T>& vv2 = gr.value(v);
    const bool gq = gr.needs_grad(q), gk = gr.needs_grad(k), gv = gr.needs_grad(v);
    for (int gi = 0; gi < groups; ++gi) {
      const Index q0 = gi * nq, k0 = gi * nk;
      for (int h = 0; h < heads; ++h) {
        const Mat<T>& p = probs[static_cast<size_t>(gi * heads + h)];
        const auto dout = gy.block(q0, h * dh, nq, dh);
        if (gv) gr.grad_ref(v).block(k0, h * dh, nk, dh).noalias() += p.transpose() * dout;
        if (!gq && !gk) continue;
        Mat<T> dp = dout * vv2.block(k0, h * dh, nk, dh).transpose();
        Mat<T> ds(p.rows(), p.cols());
        for (Index i = 0; i < p.rows(); ++i) {
          const T inner = dp.row(i).dot(p.row(i));
          ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - inner).matrix());
        }
        ds *= sc;
        if (gq) gr.grad_ref(q).block(q0, h * dh, nq, dh).noalias() += ds * kv2.block(k0, h * dh, nk, dh);
        if (gk) gr.grad_ref(k).block(k0, h * dh, nk, dh).noalias() += ds.transpose() * qv2.block(q0, h * dh, nq, dh);
      }
    }
  });
}

template <typename T>
Var rope(Graph<T>& g, Var x, const std::vector<T>& positions, const std::vector<T>& freqs, int heads) {
  const Mat<T>& xv = g.value(x);
  const Index n = xv.rows();
  const Index d = xv.cols();
  require(static_cast<Index>(positions.size()) == n, "rope: one position per row required");
  require(heads > 0 && d % heads == 0, "rope: width not divisible by heads");
  const Index dh = d / heads;
  if (dh % 2 != 0) throw ConfigError("rope: head dimension must be even");
  require(static_cast<Index>(freqs.size()) == dh / 2, "rope: one frequency per channel pair");

  Mat<T> cosv(n, dh / 2), sinv(n, dh / 2);
  for (Index r = 0; r < n; ++r)
    for (Index p = 0; p < dh / 2; ++p) {
      const T a = freqs[static_cast<size_t>(p)] * positions[static_cast<size_t>(r)];
      cosv(r, p) = std::cos(a);
      sinv(r, p) = std::sin(a);
    }
  Mat<T> y(n, d);
  for (Index r = 0; r < n; ++r)
    for (int h = 0; h < heads; ++h)
      for (Index p = 0; p < dh / 2; ++p) {
        const Index c0 = h * dh + 2 * p;
        const T x0 = xv(r, c0), x1 = xv(r, c0 + 1);
        y(r, c0) = x0 * cosv(r, p) - x1 * sinv(r, p);
        y(r, c0 + 1) = x0 * sinv(r, p) + x1 * cosv(r, p);
      }
  return g.emit(std::move(y), {x}, [x, heads, dh, cosv = std::move(cosv), sinv = std::move(sinv)](Graph<T>& gr, Var self) {
    const Mat<T>& gy = gr.grad(self);
    Mat<T>& gx = gr.grad_ref(x);
    for (Index r = 0; r < gy.rows(); ++r)
      for (int h = 0; h < heads; ++h)
        for (Index p = 0; p < dh / 2; ++p) {
          const Index c0 = h * dh + 2 * p;
          const T g0 = gy(r, c0), g1 = gy(r, c0 + 1);
          gx(r, c0) += g0 * cosv(r, p) + g1 * sinv(r, p);
          gx(r, c0 + 1) += -g0 * sinv(r, p) + g1 * cosv(r, p);
        }
  });
}

template <typename T>
Var concat_cols(Graph<T>& g, Var a, Var b) {
  const Mat<T>& av = g.value(a);
  const Mat<T>& bv = g.value(b);
  require(av.rows() == bv.rows(), "concat_cols: row count mismatch");
  Mat<T> y(av.rows(), av.cols() + bv.cols());
  y.leftCols(av.cols()) = av;
  y.rightCols(bv.cols()) = bv;
  const Index ca = av.cols();
  return g.emit(std::move(y), {a, b}, [a, b, ca](Graph<T>& gr, Var self) {
    const Mat<T>& gy = gr.grad(self);
    if (gr.needs_grad(a)) gr.grad_ref(a) += gy.leftCols(ca);
    if (gr.needs_grad(b)) gr.grad_ref(b) += gy.rightCols(gy.cols() - ca);
  });
}

template <typename T>
Var concat_rows(Graph<T>& g, const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Index rows = 0;
  const Index cols = g.value(parts.front()).cols();
  for (Var p : parts) {
    require(g.value(p).cols() == cols, "concat_rows: column count mismatch");
    rows += g.value(p).rows();
  }
  Mat<T> y(rows, cols);
  Index at = 0;
  for (Var p : parts) {
    const Mat<T>& pv = g.value(p);
    y.middleRows(at, pv.rows()) = pv;
    at += pv.rows();
  }
  return g.emit(std::move(y), parts, [parts](Graph<T>& gr, Var self) {
    const Mat<T>& gy = gr.grad(self);
    Index off = 0;
    for (Var p : parts) {
      const Index r = gr.value(p).rows();
      if (gr.needs_grad(p)) gr.grad_ref(p) += gy.middleRows(off, r);
      off += r;
    }
  });
}

template <typename T>
Var slice_rows(Graph<T>& g, Var x, Index start, Index count) {
  const Mat<T>& xv = g.value(x);
  require(start >= 0 && count >= 0 && start + count <= xv.rows(), "slice_rows: out of range");
  Mat<T> y = xv.middleRows(start, count);
  return g.emit(std::move(y), {x}, [x, start, count](Graph<T>& gr, Var self) {
    gr.grad_ref(x).middleRows(start, count) += gr.grad(self);
  });
}

template <typename T>
Var gather_rows(Graph<T>& g, Var table, const std::vector<int>& ids) {
  const Mat<T>& tv = g.value(table);
  Mat<T> y(static_cast<Index>(ids.size()), tv.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) throw ShapeError("gather_rows: index out of range");
    y.row(static_cast<Index>(i)) = tv.row(ids[i]);
  }
  return g.emit(std::move(y), {table}, [table, ids](Graph<T>& gr, Var self) {
    const Mat<T>& gy = gr.grad(self);
    Mat<T>& gt = gr.grad_ref(table);
    for (size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += gy.row(static_cast<Index>(i));
  });
}

template <typename T>
Var broadcast_rows(Graph<T>& g, Var row, Index n) {
  const Mat<T>& rv = g.value(row);
  require(rv.rows() == 1, "broadcast_rows: expects a single row");
  Mat<T> y = rv.replicate(n, 1);
  return g.emit(std::move(y), {row}, [row](Graph<T>& gr, Var self) {
    gr.grad_ref(row) += gr.grad(self).colwise().sum();
  });
}

template <typename T>
Var left_mul(Graph<T>& g, const Mat<T>& op, Var x) {
  const Mat<T>& xv = g.value(x);
  require(op.cols() == xv.rows(), "left_mul: operator width does not match rows");
  Mat<T> y = op * xv;
  return g.emit(std::move(y), {x}, [x, op](Graph<T>& gr, Var self) {
    gr.grad_ref(x).noalias() += op.transpose() * gr.grad(self);
  });
}

template <typename T>
Var conv1d(Graph<T>& g, Var x, Var w, Var b, const ConvSpec& spec) {
  const Mat<T>& xv = g.value(x);
  const Mat<T>& wv = g.value(w);
  const Index t_in = xv.rows();
  const Index cin = xv.cols();
  require(wv.rows() == spec.kernel * cin, "conv1d: weight rows must equal kernel * input channels");
  const Index t_out = spec.output_length(t_in);
  require(t_out >= 1, "conv1d: output would be empty");

  Mat<T> cols = Mat<T>::Zero(t_out, spec.kernel * cin);
  for (Index t = 0; t < t_out; ++t)
    for (int kk = 0; kk < spec.kernel; ++kk) {
      const Index src = t * spec.stride - spec.padding + kk * spec.dilation;
      if (src >= 0 && src < t_in) cols.row(t).segment(kk * cin, cin) = xv.row(src);
    }
  Mat<T> y = cols * wv;
  if (b.valid()) y.rowwise() += g.value(b).row(0);
  std::vector<Var> parents{x, w};
  if (b.valid()) parents.push_back(b);
  return g.emit(std::move(y), parents, [x, w, b, spec, t_in, cin, cols = std::move(cols)](Graph<T>& gr, Var self) {
    const Mat<T>& gy = gr.grad(self);
    if (gr.needs_grad(w)) gr.grad_ref(w).noalias() += cols.transpose() * gy;
    if (b.valid() && gr.needs_grad(b)) gr.grad_ref(b) += gy.colwise().sum();
    if (!gr.needs_grad(x)) return;
    Mat<T> dcols = gy * gr.value(w).transpose();
    Mat<T>& gx = gr.grad_ref(x);
    for (Index t = 0; t < dcols.rows(); ++t)
      for (int kk = 0; kk < spec.kernel; ++kk) {
        const Index src = t * spec.stride - spec.padding + kk * spec.dilation;
        if (src >= 0 && src < t_in) gx.row(src) += dcols.row(t).segment(kk * cin, cin);
      }
  });
}

template <typename T>
Var masked_mse(Graph<T>& g, Var a, Var b, Index rows) {
  const Mat<T>& av = g.value(a);
  const Mat<T>& bv = g.value(b);
  require(av.rows() == bv.rows() && av.cols() == bv.cols(), "masked_mse: shape mismatch");
  require(rows >= 1 && rows <= av.rows(), "masked_mse: row count out of range");
  const T n = static_cast<T>(rows * av.cols());
  Mat<T> diff = av.topRows(rows) - bv.topRows(rows);
  Mat<T> y(1, 1);
  y(0, 0) = diff.squaredNorm() / n;
  return g.emit(std::move(y), {a, b}, [a, b, rows, n, diff = std::move(diff)](Graph<T>& gr, Var self) {
    const T s = gr.grad(self)(0, 0) * T(2) / n;
    if (gr.needs_grad(a)) gr.grad_ref(a).topRows(rows) += diff * s;
    if (gr.needs_grad(b)) gr.grad_ref(b).topRows(rows) -= diff * s;
  });
}

template <typename T>
Var cross_entropy_sum(Graph<T>& g, Var logits, const std::vector<int>& targets,
                      const std::vector<std::uint8_t>& supervised) {
  const Mat<T>& lv = g.value(logits);
  require(static_cast<Index>(targets.size()) == lv.rows() && supervised.size() == targets.size(),
          "cross_entropy: one target per row required");
  Mat<T> probs = softmax_rows(lv);
  Mat<T> y = Mat<T>::Zero(1, 1);
  for (Index r = 0; r < lv.rows(); ++r) {
    if (!supervised[static_cast<size_t>(r)]) continue;
    const int t = targets[static_cast<size_t>(r)];
    if (t < 0 || t >= lv.cols()) throw ShapeError("cross_entropy: target out of range");
    const T mx = lv.row(r).maxCoeff();
    const T lse = mx + std::log((lv.row(r).array() - mx).exp().sum());
    y(0, 0) += lse - lv(r, t);
  }
  return g.emit(std::move(y), {logits}, [logits, targets, supervised, probs = std::move(probs)](Graph<T>& gr, Var self) {
    const T s = gr.grad(self)(0, 0);
    Mat<T>& gl = gr.grad_ref(logits);
    for (Index r = 0; r < probs.rows(); ++r) {
      if (!supervised[static_cast<size_t>(r)]) continue;
      gl.row(r) += probs.row(r) * s;
      gl(r, targets[static_cast<size_t>(r)]) -= s;
    }
  });
}

template <typename T>
Var sum_all(Graph<T>& g, Var x) {
  Mat<T> y(1, 1);
  y(0, 0) = g.value(x).sum();
  return g.emit(std::move(y), {x}, [x](Graph<T>& gr, Var self) {
    gr.grad_ref(x).array() += gr.grad(self)(0, 0);
  });
}

template <typename T>
Var stop_gradient(Graph<T>& g, Var x) {
  return g.constant(g.value(x));
}

}  // namespace ops

#define MSCL_INSTANTIATE_OPS(T)                                                                       \
  template T gelu_value<T>(T);                                                                        \
  template Mat<T> softmax_rows<T>(const Mat<T>&);                                                     \
  namespace ops {                                                                                     \
  template Var matmul<T>(Graph<T>&, Var, Var);                                                        \
  template Var linear<T>(Graph<T>&, Var, Var, Var);                                                   \
  template Var add<T>(Graph<T>&, Var, Var);                                                           \
  template Var sub<T>(Graph<T>&, Var, Var);                                                           \
  template Var add_row<T>(Graph<T>&, Var, Var);                                                       \
  template Var scale<T>(Graph<T>&, Var, T);                                                           \
  template Var gelu<T>(Graph<T>&, Var);                                                               \
  template Var layer_norm<T>(Graph<T>&, Var, Var, Var);                                               \
  template Var attention<T>(Graph<T>&, Var, Var, Var, int, const AttentionMask*, int, const std::vector<int>*);                     \
  template Var rope<T>(Graph<T>&, Var, const std::vector<T>&, const std::vector<T>&, int);            \
  template Var concat_cols<T>(Graph<T>&, Var, Var);                                                   \
  template Var concat_rows<T>(Graph<T>&, const std::vector<Var>&);                                    \
  template Var slice_rows<T>(Graph<T>&, Var, Index, Index);                                           \
  template Var gather_rows<T>(Graph<T>&, Var, const std::vector<int>&);                               \
  template Var broadcast_rows<T>(Graph<T>&, Var, Index);                                              \
  template Var left_mul<T>(Graph<T>&, const Mat<T>&, Var);                                            \
  template Var conv1d<T>(Graph<T>&, Var, Var, Var, const ConvSpec&);                                  \
  template Var masked_mse<T>(Graph<T>&, Var, Var, Index);                                             \
  template Var cross_entropy_sum<T>(Graph<T>&, Var, const std::vector<int>&,                          \
                                    const std::vector<std::uint8_t>&);                                \
  template Var sum_all<T>(Graph<T>&, Var);                                                            \
  template Var stop_gradient<T>(Graph<T>&, Var);                                                      \
  }

MSCL_INSTANTIATE_OPS(float)
MSCL_INSTANTIATE_OPS(double)

}  // namespace mscl
