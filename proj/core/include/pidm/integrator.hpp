#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "pidm/systems.hpp"

namespace pidm {

/// Six-stage Dormand-Prince tableau; only the fifth-order weights are carried.
struct ButcherTableau {
  std::array<double, 6> c;
  std::array<std::array<double, 6>, 6> a;  // a[i][j], j < i
  std::array<double, 6> b;
};

const ButcherTableau& dormand_prince_tableau();

/// Thrown by dp45_rollout when the state leaves the amplitude bound or stops being finite.
class BoundExceeded : public std::runtime_error {
 public:
  BoundExceeded(std::size_t step, double magnitude);
  std::size_t step() const noexcept { return step_; }
  double magnitude() const noexcept { return magnitude_; }

 private:
  std::size_t step_;
  double magnitude_;
};

namespace detail {

inline bool finite_all(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}
template <class V>
bool finite_all(const std::vector<V>&) {
  return true;  // tape values are checked when recorded
}

}  // namespace detail

/// One fifth-order step of `rhs` on per-component values (double or Var columns).
/// Throws NumericError when a stage derivative is non-finite.
template <class V, class Rhs>
std::vector<V> dp45_step_with(const Rhs& rhs, const std::vector<V>& s, double dt) {
  const auto& tab = dormand_prince_tableau();
  const std::size_t d = s.size();
  std::array<std::vector<V>, 6> k;
  k[0] = rhs(s);
  if (!detail::finite_all(k[0])) throw NumericError("dp45_stage_1", 0, "forward");
  for (std::size_t i = 1; i < 6; ++i) {
    std::vector<V> stage;
    stage.reserve(d);
    for (std::size_t c = 0; c < d; ++c) {
      V acc = k[0][c] * tab.a[i][0];
      for (std::size_t j = 1; j < i; ++j) acc = acc + k[j][c] * tab.a[i][j];
      stage.push_back(s[c] + acc * dt);
    }
    k[i] = rhs(stage);
    if (!detail::finite_all(k[i])) throw NumericError("dp45_stage_" + std::to_string(i + 1), i, "forward");
  }
  std::vector<V> out;
  out.reserve(d);
  for (std::size_t c = 0; c < d; ++c) {
    V acc = k[0][c] * tab.b[0];
    for (std::size_t j = 2; j < 6; ++j) acc = acc + k[j][c] * tab.b[j];
    out.push_back(s[c] + acc * dt);
  }
  return out;
}

template <class V, class P>
std::vector<V> dp45_step_components(const SystemSpec& spec, const std::vector<V>& s,
                                    const std::vector<P>& p, double dt) {
  return dp45_step_with(
      [&](const std::vector<V>& x) { return field(spec, x, p); }, s, dt);
}

/// One step for every leading-axis row of state [..., D_s].
Tensor dp45_step(const SystemSpec& spec, const Tensor& state, const ParamVector& params, double dt);
/// Tape-differentiable step in state [..., D_s] and params [D_p].
Var dp45_step(const SystemSpec& spec, const Var& state, const Var& params, double dt);

/// Trajectory [n_steps + 1, D_s] sampled every dt, each interval integrated with
/// `substeps` steps of dt / substeps. Throws BoundExceeded with the interval index.
Tensor dp45_rollout(const SystemSpec& spec, std::span<const double> x0, const ParamVector& params,
                    double dt, std::size_t n_steps, std::size_t substeps);

/// Empirical global order from endpoint errors at h, h/2, h/4 (h = horizon / base_steps)
/// against an h/64 reference: least-squares slope of log2(error) on log2(h).
template <class Rhs>
double convergence_order_with(const Rhs& rhs, const std::vector<double>& x0, double horizon,
                              std::size_t base_steps = 10) {
  auto endpoint = [&](std::size_t n) {
    std::vector<double> x = x0;
    const double h = horizon / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) x = dp45_step_with(rhs, x, h);
    return x;
  };
  const auto ref = endpoint(base_steps * 64);
  std::array<double, 3> lx{}, ly{};
  for (std::size_t r = 0; r < 3; ++r) {
    const std::size_t n = base_steps << r;
    const auto x = endpoint(n);
    double err = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) err = std::max(err, std::abs(x[i] - ref[i]));
    lx[r] = std::log2(horizon / static_cast<double>(n));
    ly[r] = std::log2(err);
  }
  const double mx = (lx[0] + lx[1] + lx[2]) / 3.0;
  const double my = (ly[0] + ly[1] + ly[2]) / 3.0;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t r = 0; r < 3; ++r) {
    sxy += (lx[r] - mx) * (ly[r] - my);
    sxx += (lx[r] - mx) * (lx[r] - mx);
  }
  return sxy / sxx;
}

double convergence_order(const SystemSpec& spec, std::span<const double> x0,
                         const ParamVector& params, double horizon, std::size_t base_steps = 10);

}  // namespace pidm
