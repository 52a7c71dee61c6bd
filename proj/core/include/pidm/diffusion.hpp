#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "pidm/rng.hpp"
#include "pidm/tensor.hpp"

namespace pidm {

/// Linear DDPM schedule. Timesteps run 1..T; alpha_bar(0) is 1 by convention.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  /// beta_t linear from beta_1 to beta_T.
  static NoiseSchedule linear(std::size_t T, double beta_1 = 1e-4, double beta_T = 0.02);

  /// The 1e-4..0.02 ramp rescaled by 1000 / T so that short schedules still end
  /// near pure noise. Equals linear(T) at T = 1000.
  static NoiseSchedule scaled_linear(std::size_t T);

  std::size_t steps() const noexcept { return beta_.size(); }
  double beta(std::size_t t) const { return beta_.at(t - 1); }
  double alpha(std::size_t t) const { return 1.0 - beta(t); }
  double alpha_bar(std::size_t t) const { return t == 0 ? 1.0 : alpha_bar_.at(t - 1); }
  double beta_1() const { return beta_.front(); }
  double beta_T() const { return beta_.back(); }

 private:
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& s);

/// Deterministic part of the ancestral update,
///   (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t).
/// With clip_x0 > 0 the implied x0 estimate is first clamped to [-clip_x0, clip_x0]
/// and the same mean is formed from it; both forms agree when the clamp is inactive.
Tensor reverse_mean(const Tensor& x_t, std::size_t t, const Tensor& eps_hat,
                    const NoiseSchedule& s, double clip_x0 = 0.0);

/// Ancestral step to x_{t-1}; adds sqrt(beta_t) z for t > 1 only.
Tensor reverse_step(const Tensor& x_t, std::size_t t, const Tensor& eps_hat,
                    const NoiseSchedule& s, Rng& rng, double clip_x0 = 0.0);

/// Noise predictor eps(x_t, t).
using EpsFn = std::function<Tensor(const Tensor& x_t, std::size_t t)>;

/// Draws x_T ~ N(0, I) of the given shape, then runs T ancestral steps.
Tensor ddpm_sample(const NoiseSchedule& s, const EpsFn& eps, const Shape& shape, Rng& rng,
                   double clip_x0 = 0.0);

/// Standard-normal tensor.
Tensor randn(const Shape& shape, Rng& rng);

}  // namespace pidm
