#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pidm/autodiff.hpp"
#include "pidm/ops.hpp"
#include "pidm/rng.hpp"

namespace pidm {

enum class SystemKind { Lorenz, Rossler, Hyper5D, Lorenz96, Rabinovich };
enum class Condition { ID, OOD };

std::string_view to_string(Condition c) noexcept;
Condition parse_condition(std::string_view s);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double width() const noexcept { return hi - lo; }
  bool contains(double v) const noexcept { return v >= lo && v <= hi; }
};

/// Delay-embedding settings used for Lyapunov estimation.
struct LyapunovSettings {
  std::size_t m = 3;
  std::size_t tau = 1;
  std::size_t m_sep = 25;
  std::size_t tlen = 75;
};

struct SystemSpec {
  SystemKind kind;
  std::string name;
  std::size_t state_dim;
  std::size_t param_dim;
  std::vector<std::string> param_names;
  std::vector<Interval> id_box;
  /// Empty when the OOD region is a widened band around id_box (see ood_widening).
  std::vector<Interval> ood_box;
  /// Fractional widening of id_box per side that defines the OOD band, or 0.
  double ood_widening = 0.0;
  double amplitude_bound;
  double lambda_base;
  LyapunovSettings lyapunov;
  std::size_t groundtruth_substeps;

  std::size_t channels() const noexcept { return state_dim + param_dim; }
};

struct ParamVector {
  std::vector<double> values;
  std::vector<std::string> names;

  std::size_t size() const noexcept { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
};

std::span<const SystemSpec> all_systems();
const SystemSpec& system_spec(SystemKind kind);
/// lorenz | rossler | hyper5d | lorenz96 | rabinovich
const SystemSpec& system_by_name(std::string_view name);

ParamVector make_params(const SystemSpec& spec, std::vector<double> values);
/// Textbook parameters (e.g. Lorenz 10, 28, 8/3), used by tests and the CLI.
ParamVector canonical_params(const SystemSpec& spec);

/// Uniform draw from the ID box, or from the OOD box (OOD side bands when the
/// system has no listed OOD box).
ParamVector sample_params(const SystemSpec& spec, Condition condition, Rng& rng);

/// Initial state drawn from the per-system seed box.
std::vector<double> sample_initial_state(const SystemSpec& spec, const ParamVector& params,
                                         Rng& rng);

/// Vector field on per-component values. `V` is double or Var (a batch column);
/// `P` is double or a single-element Var.
template <class V, class P>
std::vector<V> field(const SystemSpec& spec, const std::vector<V>& x, const std::vector<P>& p) {
  std::vector<V> dx;
  dx.reserve(spec.state_dim);
  switch (spec.kind) {
    case SystemKind::Lorenz: {
      const P& sigma = p[0];
      const P& rho = p[1];
      const P& beta = p[2];
      dx.push_back(sigma * (x[1] - x[0]));
      dx.push_back(x[0] * (rho - x[2]) - x[1]);
      dx.push_back(x[0] * x[1] - beta * x[2]);
      break;
    }
    case SystemKind::Rossler: {
      const P& a = p[0];
      const P& b = p[1];
      const P& c = p[2];
      dx.push_back(-x[1] - x[2]);
      dx.push_back(x[0] + a * x[1]);
      dx.push_back(b + x[2] * (x[0] - c));
      break;
    }
    case SystemKind::Hyper5D: {
      dx.push_back(p[0] * (x[1] - x[0]) + x[3]);
      dx.push_back(p[1] * x[0] - x[1] - x[0] * x[2] + x[4]);
      dx.push_back(x[0] * x[1] - p[2] * x[2]);
      dx.push_back(-(x[0] * x[2]) + 0.1 * x[3]);
      dx.push_back(-(x[1] * x[2]) + 0.1 * x[4]);
      break;
    }
    case SystemKind::Lorenz96: {
      const std::size_t n = spec.state_dim;
      for (std::size_t j = 0; j < n; ++j) {
        const V& xp1 = x[(j + 1) % n];
        const V& xm1 = x[(j + n - 1) % n];
        const V& xm2 = x[(j + n - 2) % n];
        dx.push_back((xp1 - xm2) * xm1 - x[j] + p[0]);
      }
      break;
    }
    case SystemKind::Rabinovich: {
      const P& alpha = p[0];
      const P& gamma = p[1];
      dx.push_back(x[1] * (x[2] - 1.0 + x[0] * x[0]) + gamma * x[0]);
      dx.push_back(x[0] * (3.0 * x[2] + 1.0 - x[0] * x[0]) + gamma * x[1]);
      dx.push_back(-2.0 * x[2] * (alpha + x[0] * x[1]));
      break;
    }
  }
  return dx;
}

/// state [..., D_s] -> f(state) [..., D_s].
Tensor eval_field(const SystemSpec& spec, const Tensor& state, const ParamVector& params);
/// Tape-differentiable in both state [..., D_s] and params [D_p].
Var eval_field(const SystemSpec& spec, const Var& state, const Var& params);

/// state [..., D_s] -> df/dx [..., D_s, D_s] (row i holds d f_i / d x_j).
Tensor eval_jacobian(const SystemSpec& spec, const Tensor& state, const ParamVector& params);

/// Splits a tape-tracked [..., D] tensor into D components of shape [...].
std::vector<Var> split_last(const Var& v);
/// Inverse of split_last.
Var join_last(const std::vector<Var>& parts);

}  // namespace pidm
