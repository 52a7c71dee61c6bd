#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "pidm/ops.hpp"
#include "pidm/rng.hpp"

namespace pidm::testing {

using ScalarFn = std::function<Var(Tape&, const Var&)>;

// Largest relative error between the tape gradient of f at x and central differences.
inline double gradient_error(const ScalarFn& f, const Tensor& x, double h = 1e-6) {
  Tape tape;
  const Var v = tape.leaf(x);
  const Var y = f(tape, v);
  tape.backward(y);
  const Tensor g = tape.grad(v);
  auto eval = [&](const Tensor& at) {
    Tape t;
    return f(t, t.constant(at)).item();
  };
  double scale = 0.0;
  for (double gv : g.data()) scale = std::max(scale, std::abs(gv));
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (eval(xp) - eval(xm)) / (2.0 * h);
    const double err = std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), 1e-3 * scale, 1e-8});
    worst = std::max(worst, err);
  }
  return worst;
}

inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(shape);
  for (double& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

}  // namespace pidm::testing
