#include "pidm/systems.hpp"

#include <array>
#include <stdexcept>

namespace pidm {
namespace {

// Lyapunov embedding settings, lambda_base and amplitude bounds per system.
const std::array<SystemSpec, 5> kSystems{{
    {SystemKind::Lorenz, "lorenz", 3, 3, {"sigma", "rho", "beta"},
     {{8.0, 12.0}, {20.0, 35.0}, {2.0, 4.0}},
     {{5.0, 8.0}, {15.0, 20.0}, {1.5, 2.0}},
     0.0, 500.0, 2.0, {3, 2, 25, 75}, 10},
    {SystemKind::Rossler, "rossler", 3, 3, {"a", "b", "c"},
     {{0.15, 0.25}, {0.15, 0.25}, {5.0, 7.0}},
     {{0.10, 0.15}, {0.10, 0.15}, {3.5, 5.0}},
     0.0, 200.0, 2.0, {3, 1, 300, 300}, 10},
    {SystemKind::Hyper5D, "hyper5d", 5, 3, {"p1", "p2", "p3"},
     {{8.0, 12.0}, {20.0, 35.0}, {2.0, 4.0}},
     {},
     0.2, 500.0, 1.5, {5, 2, 25, 75}, 10},
    {SystemKind::Lorenz96, "lorenz96", 20, 1, {"F"},
     {{7.0, 9.0}},
     {{9.0, 11.0}},
     0.0, 200.0, 0.1, {3, 2, 25, 75}, 20},
    {SystemKind::Rabinovich, "rabinovich", 3, 2, {"alpha", "gamma"},
     {{0.10, 0.18}, {0.07, 0.13}},
     {{0.20, 0.30}, {0.05, 0.09}},
     0.0, 10.0, 0.5, {3, 5, 100, 100}, 50},
}};

const std::array<std::vector<double>, 5> kCanonical{{
    {10.0, 28.0, 8.0 / 3.0},
    {0.2, 0.2, 5.7},
    {10.0, 28.0, 8.0 / 3.0},
    {8.0},
    {0.14, 0.10},
}};

}  // namespace

std::string_view to_string(Condition c) noexcept { return c == Condition::ID ? "id" : "ood"; }

Condition parse_condition(std::string_view s) {
  if (s == "id" || s == "ID") return Condition::ID;
  if (s == "ood" || s == "OOD") return Condition::OOD;
  throw std::invalid_argument("unknown condition '" + std::string(s) + "' (expected id|ood)");
}

std::span<const SystemSpec> all_systems() { return kSystems; }

const SystemSpec& system_spec(SystemKind kind) { return kSystems[static_cast<std::size_t>(kind)]; }

const SystemSpec& system_by_name(std::string_view name) {
  for (const auto& s : kSystems) {
    if (s.name == name) return s;
  }
  throw std::invalid_argument("unknown system '" + std::string(name) +
                              "' (expected lorenz|rossler|hyper5d|lorenz96|rabinovich)");
}

ParamVector make_params(const SystemSpec& spec, std::vector<double> values) {
  if (values.size() != spec.param_dim) {
    throw std::invalid_argument(spec.name + ": expected " + std::to_string(spec.param_dim) +
                                " parameters, got " + std::to_string(values.size()));
  }
  return ParamVector{std::move(values), spec.param_names};
}

ParamVector canonical_params(const SystemSpec& spec) {
  return make_params(spec, kCanonical[static_cast<std::size_t>(spec.kind)]);
}

ParamVector sample_params(const SystemSpec& spec, Condition condition, Rng& rng) {
  std::vector<double> v(spec.param_dim);
  for (std::size_t i = 0; i < spec.param_dim; ++i) {
    if (condition == Condition::ID) {
      v[i] = uniform(rng, spec.id_box[i].lo, spec.id_box[i].hi);
    } else if (!spec.ood_box.empty()) {
      v[i] = uniform(rng, spec.ood_box[i].lo, spec.ood_box[i].hi);
    } else {
      // Two side bands of width ood_widening * w, sampled with equal total mass.
      const Interval& box = spec.id_box[i];
      const double band = spec.ood_widening * box.width();
      const double u = uniform(rng, 0.0, 2.0 * band);
      v[i] = u < band ? box.lo - band + u : box.hi + (u - band);
    }
  }
  return make_params(spec, std::move(v));
}

std::vector<double> sample_initial_state(const SystemSpec& spec, const ParamVector& params,
                                         Rng& rng) {
  std::vector<double> x(spec.state_dim);
  switch (spec.kind) {
    case SystemKind::Lorenz:
    case SystemKind::Hyper5D:
      for (double& v : x) v = uniform(rng, -10.0, 10.0);
      break;
    case SystemKind::Rossler:
      for (double& v : x) v = uniform(rng, -5.0, 5.0);
      break;
    case SystemKind::Lorenz96:
      for (double& v : x) v = params[0] + uniform(rng, -0.5, 0.5);
      break;
    case SystemKind::Rabinovich:
      x[0] = uniform(rng, -1.0, 1.0);
      x[1] = uniform(rng, -1.0, 1.0);
      x[2] = uniform(rng, 0.1, 1.0);
      break;
  }
  return x;
}

Tensor eval_field(const SystemSpec& spec, const Tensor& state, const ParamVector& params) {
  const std::size_t d = spec.state_dim;
  if (state.rank() == 0 || state.shape().back() != d) {
    throw ShapeError("eval_field", state.shape(), Shape{d});
  }
  if (params.size() != spec.param_dim) {
    throw ShapeError("eval_field", Shape{params.size()}, Shape{spec.param_dim});
  }
  Tensor out(state.shape());
  const std::size_t rows = state.size() / d;
  std::vector<double> x(d);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < d; ++i) x[i] = state[r * d + i];
    const auto dx = field(spec, x, params.values);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = dx[i];
  }
  return out;
}

std::vector<Var> split_last(const Var& v) {
  const std::size_t axis = v.shape().size() - 1;
  std::vector<Var> parts;
  parts.reserve(v.shape().back());
  for (std::size_t i = 0; i < v.shape().back(); ++i) parts.push_back(select(v, axis, i));
  return parts;
}

Var join_last(const std::vector<Var>& parts) {
  return stack(parts, parts.front().shape().size());
}

Var eval_field(const SystemSpec& spec, const Var& state, const Var& params) {
  if (state.shape().empty() || state.shape().back() != spec.state_dim) {
    throw ShapeError("eval_field", state.shape(), Shape{spec.state_dim});
  }
  if (params.shape() != Shape{spec.param_dim}) {
    throw ShapeError("eval_field", params.shape(), Shape{spec.param_dim});
  }
  return join_last(field(spec, split_last(state), split_last(params)));
}

Tensor eval_jacobian(const SystemSpec& spec, const Tensor& state, const ParamVector& params) {
  const std::size_t d = spec.state_dim;
  if (state.rank() == 0 || state.shape().back() != d) {
    throw ShapeError("eval_jacobian", state.shape(), Shape{d});
  }
  Shape out_shape = state.shape();
  out_shape.push_back(d);
  Tensor out(out_shape);
  const std::size_t rows = state.size() / d;
  const auto& p = params.values;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = &state.data()[r * d];
    double* jac = &out.data()[r * d * d];
    auto J = [&](std::size_t i, std::size_t j) -> double& { return jac[i * d + j]; };
    switch (spec.kind) {
      case SystemKind::Lorenz:
        J(0, 0) = -p[0]; J(0, 1) = p[0];
        J(1, 0) = p[1] - x[2]; J(1, 1) = -1.0; J(1, 2) = -x[0];
        J(2, 0) = x[1]; J(2, 1) = x[0]; J(2, 2) = -p[2];
        break;
      case SystemKind::Rossler:
        J(0, 1) = -1.0; J(0, 2) = -1.0;
        J(1, 0) = 1.0; J(1, 1) = p[0];
        J(2, 0) = x[2]; J(2, 2) = x[0] - p[2];
        break;
      case SystemKind::Hyper5D:
        J(0, 0) = -p[0]; J(0, 1) = p[0]; J(0, 3) = 1.0;
        J(1, 0) = p[1] - x[2]; J(1, 1) = -1.0; J(1, 2) = -x[0]; J(1, 4) = 1.0;
        J(2, 0) = x[1]; J(2, 1) = x[0]; J(2, 2) = -p[2];
        J(3, 0) = -x[2]; J(3, 2) = -x[0]; J(3, 3) = 0.1;
        J(4, 1) = -x[2]; J(4, 2) = -x[1]; J(4, 4) = 0.1;
        break;
      case SystemKind::Lorenz96:
        for (std::size_t j = 0; j < d; ++j) {
          const std::size_t jp1 = (j + 1) % d, jm1 = (j + d - 1) % d, jm2 = (j + d - 2) % d;
          J(j, jp1) += x[jm1];
          J(j, jm2) -= x[jm1];
          J(j, jm1) += x[jp1] - x[jm2];
          J(j, j) -= 1.0;
        }
        break;
      case SystemKind::Rabinovich:
        J(0, 0) = 2.0 * x[0] * x[1] + p[1];
        J(0, 1) = x[2] - 1.0 + x[0] * x[0];
        J(0, 2) = x[1];
        J(1, 0) = 3.0 * x[2] + 1.0 - 3.0 * x[0] * x[0];
        J(1, 1) = p[1];
        J(1, 2) = 3.0 * x[0];
        J(2, 0) = -2.0 * x[2] * x[1];
        J(2, 1) = -2.0 * x[2] * x[0];
        J(2, 2) = -2.0 * (p[0] + x[0] * x[1]);
        break;
    }
  }
  return out;
}

}  // namespace pidm
