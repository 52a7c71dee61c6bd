#include "pidm/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace pidm {

NoiseSchedule NoiseSchedule::linear(std::size_t T, double beta_1, double beta_T) {
  if (T == 0) throw std::invalid_argument("NoiseSchedule: T must be positive");
  if (!(beta_1 > 0.0 && beta_T < 1.0 && beta_1 <= beta_T)) {
    throw std::invalid_argument("NoiseSchedule: need 0 < beta_1 <= beta_T < 1");
  }
  NoiseSchedule s;
  s.beta_.resize(T);
  s.alpha_bar_.resize(T);
  double prod = 1.0;
  for (std::size_t i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    s.beta_[i] = beta_1 + (beta_T - beta_1) * frac;
    prod *= 1.0 - s.beta_[i];
    s.alpha_bar_[i] = prod;
  }
  return s;
}

NoiseSchedule NoiseSchedule::scaled_linear(std::size_t T) {
  if (T == 0) throw std::invalid_argument("NoiseSchedule: T must be positive");
  const double k = 1000.0 / static_cast<double>(T);
  return linear(T, 1e-4 * k, std::min(0.02 * k, 0.999));
}

namespace {

void check_t(std::size_t t, const NoiseSchedule& s, const char* op) {
  if (t < 1 || t > s.steps()) {
    throw std::out_of_range(std::string(op) + ": t=" + std::to_string(t) + " outside [1, " +
                            std::to_string(s.steps()) + "]");
  }
}

}  // namespace

Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& s) {
  check_t(t, s, "q_sample");
  if (x0.shape() != eps.shape()) throw ShapeError("q_sample", x0.shape(), eps.shape());
  const double a = std::sqrt(s.alpha_bar(t));
  const double b = std::sqrt(1.0 - s.alpha_bar(t));
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

Tensor reverse_mean(const Tensor& x_t, std::size_t t, const Tensor& eps_hat,
                    const NoiseSchedule& s, double clip_x0) {
  check_t(t, s, "reverse_step");
  if (x_t.shape() != eps_hat.shape()) throw ShapeError("reverse_step", x_t.shape(), eps_hat.shape());
  Tensor out(x_t.shape());
  if (clip_x0 <= 0.0) {
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(t));
    const double coef = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = inv_sqrt_alpha * (x_t[i] - coef * eps_hat[i]);
    return out;
  }
  // Posterior-mean form: c0 * x0_hat + ct * x_t.
  const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1);
  const double sqrt_ab = std::sqrt(ab), sqrt_1mab = std::sqrt(1.0 - ab);
  const double c0 = std::sqrt(ab_prev) * s.beta(t) / (1.0 - ab);
  const double ct = std::sqrt(s.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = std::clamp((x_t[i] - sqrt_1mab * eps_hat[i]) / sqrt_ab, -clip_x0, clip_x0);
    out[i] = c0 * x0 + ct * x_t[i];
  }
  return out;
}

Tensor reverse_step(const Tensor& x_t, std::size_t t, const Tensor& eps_hat,
                    const NoiseSchedule& s, Rng& rng, double clip_x0) {
  Tensor out = reverse_mean(x_t, t, eps_hat, s, clip_x0);
  if (t > 1) {
    const double sigma = std::sqrt(s.beta(t));
    std::normal_distribution<double> z(0.0, 1.0);
    for (double& v : out.data()) v += sigma * z(rng);
  }
  return out;
}

Tensor randn(const Shape& shape, Rng& rng) {
  Tensor out(shape);
  fill_normal(rng, out.data());
  return out;
}

Tensor ddpm_sample(const NoiseSchedule& s, const EpsFn& eps, const Shape& shape, Rng& rng,
                   double clip_x0) {
  Tensor x = randn(shape, rng);
  for (std::size_t t = s.steps(); t >= 1; --t) x = reverse_step(x, t, eps(x, t), s, rng, clip_x0);
  return x;
}

}  // namespace pidm
