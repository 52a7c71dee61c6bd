#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <vector>

#include "pidm/dataset.hpp"
#include "pidm/systems.hpp"

namespace pidm {

struct EnkfConfig {
  std::size_t n_members = 50;
  double sigma_init = 2.0;
  double param_noise_frac = 0.30;
  double inflation = 1.02;
  double reg_eps = 1e-4;
  double prop_dt = 0.05;
  double deriv_clip = 1e6;
  std::optional<double> state_clip;
  /// Members that turn non-finite or exceed this magnitude are redrawn.
  double blowup = 1e6;
  /// Observation noise in normalized units; R is its image in physical units.
  double obs_sigma = 0.05;
  /// Estimate parameters as extra ensemble columns instead of holding them at truth.
  bool augment_params = false;

  void validate() const;
};

/// Standard configuration for a system (state clipping on Rabinovich).
EnkfConfig enkf_defaults(const SystemSpec& spec);

/// Classical RK4 step with every stage derivative clipped to [-clip, clip].
template <class Rhs>
std::vector<double> rk4_step_with(const Rhs& rhs, const std::vector<double>& x, double dt,
                                  double clip) {
  auto clipped = [&](const std::vector<double>& s) {
    auto k = rhs(s);
    for (double& v : k) v = std::clamp(v, -clip, clip);
    return k;
  };
  auto shifted = [&](const std::vector<double>& k, double h) {
    std::vector<double> s(x);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += h * k[i];
    return s;
  };
  const auto k1 = clipped(x);
  const auto k2 = clipped(shifted(k1, 0.5 * dt));
  const auto k3 = clipped(shifted(k2, 0.5 * dt));
  const auto k4 = clipped(shifted(k3, dt));
  std::vector<double> out(x);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  }
  return out;
}

std::vector<double> rk4_step(const SystemSpec& spec, const std::vector<double>& x,
                             const std::vector<double>& params, double dt, double clip = 1e6);

/// Ensemble members as rows [N_e, D].
struct Ensemble {
  Tensor members;

  std::size_t size() const { return members.dim(0); }
  std::size_t dim() const { return members.dim(1); }
  std::vector<double> mean() const;
  /// members - mean, [N_e, D].
  Tensor anomalies() const;
  /// Scales anomalies about the mean by `factor`.
  void inflate(double factor);
};

/// Perturbed-observation update of the first y.size() columns (H selects them).
/// Members are first inflated; P^f gets reg_eps on its diagonal.
void analysis(Ensemble& ens, const std::vector<double>& y, const std::vector<double>& r_diag,
              double inflation, double reg_eps, Rng& rng);

struct EnkfResult {
  Tensor mean;                     // [L, D_s] physical units
  std::vector<std::size_t> analysis_steps;
  Tensor forecast_means;           // [n_obs, D_s] before each analysis
  Tensor analysis_means;           // [n_obs, D_s] after each analysis
  std::vector<double> param_mean;  // final parameter estimate (truth unless augmented)
  std::size_t reinitialized = 0;   // members redrawn after blowing up
  double max_abs_state = 0.0;      // largest |x| held by any member
};

/// Filters one trajectory. Observations are normalized ([D_s, L]) and mapped to
/// physical units with `stats`; `params` are the true parameters.
/// Throws std::runtime_error naming the step when every member has blown up.
EnkfResult run_filter(const SystemSpec& spec, const ObservationSet& obs, const NormStats& stats,
                      const ParamVector& params, double dt, const EnkfConfig& cfg, Rng& rng);

}  // namespace pidm
