#pragma once

// Central finite differences against reverse-mode gradients, in double.

#include "mscl/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

namespace mscl::test {

using LossFn = std::function<Var(Graph<double>&, const ParamSet<double>&)>;

struct GradCheckResult {
  int checked = 0;
  double max_rel_err = 0;
  std::string worst;  // parameter name and element of the largest error
};

inline double scalar_loss(const LossFn& fn, const ParamSet<double>& ps) {
  Graph<double> g(false);
  const Var l = fn(g, ps);
  return g.value(l)(0, 0);
}

// Checks `count` random (parameter, element) pairs drawn from parameters
// accepted by `filter` (all when empty).
inline GradCheckResult grad_check(ParamSet<double>& ps, const LossFn& fn, int count, Rng& rng, double h = 1e-4,
                                  const std::function<bool(const std::string&)>& filter = {}) {
  Graph<double> g;
  const Var l = fn(g, ps);
  GradSet<double> grads(ps);
  g.backward(l, &grads);

  std::vector<ParamId> pool;
  for (ParamId i = 0; i < ps.size(); ++i)
    if (ps.value(i).size() > 0 && (!filter || filter(ps.name(i)))) pool.push_back(i);
  GradCheckResult res;
  if (pool.empty()) return res;
  for (int n = 0; n < count; ++n) {
    const ParamId id = pool[rng.uniform_int(pool.size())];
    Mat<double>& w = ps.value(id);
    const Index e = static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(w.size())));
    double& x = w.data()[e];
    const double saved = x;
    x = saved + h;
    const double up = scalar_loss(fn, ps);
    x = saved - h;
    const double down = scalar_loss(fn, ps);
    x = saved;
    const double numeric = (up - down) / (2 * h);
    const double analytic = grads[id].data()[e];
    const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6});
    ++res.checked;
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst = ps.name(id) + "[" + std::to_string(e) + "] analytic " + std::to_string(analytic) + " numeric " +
                  std::to_string(numeric);
    }
  }
  return res;
}

}  // namespace mscl::test
