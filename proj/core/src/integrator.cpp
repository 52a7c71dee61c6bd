#include "pidm/integrator.hpp"

#include <algorithm>
#include <limits>

namespace pidm {

const ButcherTableau& dormand_prince_tableau() {
  static const ButcherTableau tab{
      {0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0},
      {{
          {0.0, 0.0, 0.0, 0.0, 0.0, 0.0},
          {1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0},
          {3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0},
          {44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0},
          {19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0},
          {9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0},
      }},
      {35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0},
  };
  return tab;
}

BoundExceeded::BoundExceeded(std::size_t step, double magnitude)
    : std::runtime_error("trajectory left the amplitude bound at step " + std::to_string(step) +
                         " (|x| = " + std::to_string(magnitude) + ")"),
      step_(step),
      magnitude_(magnitude) {}

Tensor dp45_step(const SystemSpec& spec, const Tensor& state, const ParamVector& params, double dt) {
  const std::size_t d = spec.state_dim;
  if (state.rank() == 0 || state.shape().back() != d) {
    throw ShapeError("dp45_step", state.shape(), Shape{d});
  }
  if (params.size() != spec.param_dim) {
    throw ShapeError("dp45_step", Shape{params.size()}, Shape{spec.param_dim});
  }
  Tensor out(state.shape());
  const std::size_t rows = state.size() / d;
  std::vector<double> x(d);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(&state.data()[r * d], d, x.begin());
    const auto y = dp45_step_components(spec, x, params.values, dt);
    std::copy(y.begin(), y.end(), &out.data()[r * d]);
  }
  return out;
}

Var dp45_step(const SystemSpec& spec, const Var& state, const Var& params, double dt) {
  if (state.shape().empty() || state.shape().back() != spec.state_dim) {
    throw ShapeError("dp45_step", state.shape(), Shape{spec.state_dim});
  }
  if (params.shape() != Shape{spec.param_dim}) {
    throw ShapeError("dp45_step", params.shape(), Shape{spec.param_dim});
  }
  return join_last(dp45_step_components(spec, split_last(state), split_last(params), dt));
}

Tensor dp45_rollout(const SystemSpec& spec, std::span<const double> x0, const ParamVector& params,
                    double dt, std::size_t n_steps, std::size_t substeps) {
  const std::size_t d = spec.state_dim;
  if (x0.size() != d) throw ShapeError("dp45_rollout", Shape{x0.size()}, Shape{d});
  if (substeps == 0) throw std::invalid_argument("dp45_rollout: substeps must be >= 1");
  Tensor out(Shape{n_steps + 1, d});
  std::vector<double> x(x0.begin(), x0.end());
  std::copy(x.begin(), x.end(), out.data().begin());
  const double h = dt / static_cast<double>(substeps);
  for (std::size_t n = 1; n <= n_steps; ++n) {
    for (std::size_t s = 0; s < substeps; ++s) {
      try {
        x = dp45_step_components(spec, x, params.values, h);
      } catch (const NumericError&) {
        throw BoundExceeded(n, std::numeric_limits<double>::infinity());
      }
      double mag = 0.0;
      for (double v : x) mag = std::isfinite(v) ? std::max(mag, std::abs(v)) : INFINITY;
      if (mag > spec.amplitude_bound) throw BoundExceeded(n, mag);
    }
    std::copy(x.begin(), x.end(), &out.data()[n * d]);
  }
  return out;
}

double convergence_order(const SystemSpec& spec, std::span<const double> x0,
                         const ParamVector& params, double horizon, std::size_t base_steps) {
  const auto& p = params.values;
  return convergence_order_with(
      [&](const std::vector<double>& x) { return field(spec, x, p); },
      std::vector<double>(x0.begin(), x0.end()), horizon, base_steps);
}

}  // namespace pidm
