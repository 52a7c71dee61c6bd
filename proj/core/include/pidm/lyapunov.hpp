#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pidm/systems.hpp"

namespace pidm {

struct EmbeddingConfig {
  std::size_t m = 3;
  std::size_t tau = 1;
  std::size_t m_sep = 25;
  std::size_t tlen = 75;
  std::size_t n_windows = 3;

  static EmbeddingConfig from(const LyapunovSettings& s, std::size_t n_windows = 3);
  void validate() const;
};

struct LyapunovEstimate {
  double lambda_max = 0.0;  // mean of the window slopes, 1 / time unit
  double r2 = 0.0;          // mean fit quality over windows
  std::size_t fit_begin = 1;
  std::size_t fit_end = 0;  // inclusive step range of the fit
  std::vector<double> window_lambdas;
  std::vector<double> window_r2;
};

/// Delay vectors [L - (m - 1) tau, m], row i = (s[i], s[i + tau], ..., s[i + (m-1) tau]).
Tensor delay_embed(std::span<const double> series, std::size_t m, std::size_t tau);

/// Mean log divergence <ln d(k)> for k = 0..tlen of nearest-neighbour pairs in
/// `embedded` [n, m], neighbours restricted to |i - j| > m_sep. Also reports the
/// chosen neighbour of every reference point (or n when none qualified).
struct DivergenceCurve {
  std::vector<double> mean_log;  // index k
  std::vector<std::size_t> neighbour;
};
DivergenceCurve divergence_curve(const Tensor& embedded, std::size_t m_sep, std::size_t tlen);

/// Rosenstein estimate from a scalar series: slope of <ln d(k)> against k dt over
/// k = 1..tlen, averaged over n_windows equal non-overlapping windows.
LyapunovEstimate rosenstein_mle(std::span<const double> series, double dt, const EmbeddingConfig& cfg);

/// Same, embedding the first state component of a trajectory [L, D_s].
LyapunovEstimate rosenstein_mle(const Tensor& trajectory, double dt, const EmbeddingConfig& cfg);

}  // namespace pidm
