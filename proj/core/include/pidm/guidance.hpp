#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "pidm/dataset.hpp"
#include "pidm/diffusion.hpp"
#include "pidm/systems.hpp"

namespace pidm {

struct GuidanceConfig {
  double lambda_base = 0.0;
  double w_data = 150.0;
  double g_thresh = 0.15;
  double eps_norm = 1e-8;
  double phy_abort = 1e4;
  double x0_clamp = 3.0;
  /// x0 clip inside the plain reverse step (0 disables it); see reverse_mean.
  double reverse_clip = 1.0;

  /// Throws std::invalid_argument on negative weights or a non-positive g_thresh.
  void validate() const;
};

/// x0_hat = clamp((x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t), -c, c), eps_hat held fixed.
Var recover_x0(const Var& x_t, std::size_t t, const Tensor& eps_hat, const NoiseSchedule& s,
               double clamp_at);

/// Same, with eps_hat a tape value so the gradient also flows through the denoiser.
Var recover_x0(const Var& x_t, std::size_t t, const Var& eps_hat, const NoiseSchedule& s, double clamp_at);

/// Time mean of the parameter rows of a joint [C, L] sequence whose first
/// `state_dim` rows are states. Returns [C - state_dim].
Var pool_params(const Var& joint, std::size_t state_dim);

/// log(1 + mse(dp45(s[0..L-2], p, dt), s[1..L-1])) for states [L, D_s].
Var physics_loss(const Var& states, const Var& p_hat, const SystemSpec& spec, double dt);

/// Mean over observed indices of the squared state error ||x0[:D_s, k] - y_k||^2.
Var data_loss(const Var& x0_hat, const ObservationSet& obs, std::size_t state_dim);

/// lambda_base * (1 - t / T).
double lambda_schedule(std::size_t t, std::size_t T, double lambda_base);

/// Zero when l_phy > phy_abort; otherwise g rescaled to norm min(||g||, g_thresh).
/// The caller subtracts the result, which descends the guidance objective.
Tensor safe_project(const Tensor& g, double l_phy, const GuidanceConfig& cfg);

/// Everything the guidance objective needs besides the current sample.
struct GuidanceProblem {
  const SystemSpec* spec = nullptr;
  const NormStats* stats = nullptr;
  const ObservationSet* obs = nullptr;
  const NoiseSchedule* schedule = nullptr;
  double dt = 0.05;
  GuidanceConfig cfg{};
  /// Differentiable denoiser used to form x0_hat from the guided sample. When
  /// empty, the eps predicted for the preceding step is reused as a constant.
  std::function<Var(Tape& tape, const Var& x, std::size_t t)> eps_on_tape;
  /// Test hook: returning true for a timestep forces that step's physics loss to NaN.
  std::function<bool(std::size_t t)> fault;
};

struct GuidanceEval {
  double l_data = 0.0;
  double l_phy = 0.0;
  double l_total = 0.0;
  Tensor grad;  // d l_total / d x, same shape as x
};

/// Objective w_data L_data + lambda L_phy at the sample x of noise level t_prev,
/// with its gradient. x0_hat comes from prob.eps_on_tape when set (t_prev >= 1),
/// else from the fixed eps_hat. Throws NumericError on non-finite values.
GuidanceEval guidance_objective(const GuidanceProblem& prob, const Tensor& x, std::size_t t_prev,
                                const Tensor& eps_hat, double lambda, bool inject_fault = false);

struct GuidanceTraceEntry {
  std::size_t t = 0;
  double lambda = 0.0;
  bool guided = false;
  bool fallback = false;
  double l_data = 0.0;
  double l_phy = 0.0;
  double g_norm = 0.0;
  double correction_norm = 0.0;
};

struct SampleOutcome {
  Tensor x0_hat;               // [C, L] normalized
  std::vector<double> p_hat;   // physical units
  std::size_t fallback_count = 0;
  std::size_t guided_steps = 0;
  std::vector<GuidanceTraceEntry> trace;  // one entry per reverse step, t = T..1
};

/// Physics-informed ancestral sampling of one [C, L] joint sequence. Each step
/// takes the plain reverse update, then, when lambda(t) > 0, subtracts the
/// projected gradient of the guidance objective. Failures inside a guidance
/// step are absorbed and counted as fallbacks. With lambda_base = 0 the rng
/// stream and result match ddpm_sample exactly.
SampleOutcome sample(const EpsFn& eps, const GuidanceProblem& prob, Rng& rng);

/// Time-mean parameters (physical units) of a normalized joint sequence [C, L].
std::vector<double> pooled_params(const Tensor& joint, const NormStats& stats, std::size_t state_dim);

}  // namespace pidm
