#include "pidm/lyapunov.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace pidm {

EmbeddingConfig EmbeddingConfig::from(const LyapunovSettings& s, std::size_t n_windows) {
  return EmbeddingConfig{s.m, s.tau, s.m_sep, s.tlen, n_windows};
}

void EmbeddingConfig::validate() const {
  // tlen >= 5 so the slope fit over k = 1..tlen has at least five points.
  if (m < 1 || tau < 1 || tlen < 5 || n_windows < 1) {
    throw std::invalid_argument("EmbeddingConfig: need m >= 1, tau >= 1, tlen >= 5, n_windows >= 1");
  }
}

Tensor delay_embed(std::span<const double> series, std::size_t m, std::size_t tau) {
  if (m == 0 || tau == 0) throw std::invalid_argument("delay_embed: m and tau must be positive");
  const std::size_t span = (m - 1) * tau;
  if (series.size() <= span) {
    throw std::invalid_argument("delay_embed: series of length " + std::to_string(series.size()) +
                                " too short for m=" + std::to_string(m) + ", tau=" + std::to_string(tau));
  }
  const std::size_t n = series.size() - span;
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < m; ++d) out(i, d) = series[i + d * tau];
  return out;
}

namespace {

double dist(const Tensor& y, std::size_t i, std::size_t j) {
  const std::size_t m = y.dim(1);
  double sq = 0.0;
  for (std::size_t d = 0; d < m; ++d) {
    const double v = y(i, d) - y(j, d);
    sq += v * v;
  }
  return std::sqrt(sq);
}

struct Fit {
  double slope;
  double r2;
};

Fit ols(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  const double slope = sxy / sxx;
  const double r2 = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return {slope, r2};
}

}  // namespace

DivergenceCurve divergence_curve(const Tensor& y, std::size_t m_sep, std::size_t tlen) {
  const std::size_t n = y.dim(0);
  if (n <= tlen + 1) throw std::invalid_argument("divergence_curve: too few embedded points for tlen");
  // Reference points and neighbours must both be followable for tlen steps.
  const std::size_t usable = n - tlen;
  DivergenceCurve curve;
  curve.neighbour.assign(usable, n);
  for (std::size_t i = 0; i < usable; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < usable; ++j) {
      const std::size_t gap = i > j ? i - j : j - i;
      if (gap <= m_sep) continue;
      const double d = dist(y, i, j);
      if (d > 0.0 && d < best) {
        best = d;
        curve.neighbour[i] = j;
      }
    }
  }
  curve.mean_log.assign(tlen + 1, 0.0);
  std::vector<std::size_t> counts(tlen + 1, 0);
  for (std::size_t i = 0; i < usable; ++i) {
    const std::size_t j = curve.neighbour[i];
    if (j == n) continue;
    for (std::size_t k = 0; k <= tlen; ++k) {
      const double d = dist(y, i + k, j + k);
      if (d > 0.0) {
        curve.mean_log[k] += std::log(d);
        ++counts[k];
      }
    }
  }
  for (std::size_t k = 0; k <= tlen; ++k) {
    if (counts[k] == 0) throw std::runtime_error("divergence_curve: no valid neighbour pairs");
    curve.mean_log[k] /= static_cast<double>(counts[k]);
  }
  return curve;
}

LyapunovEstimate rosenstein_mle(std::span<const double> series, double dt, const EmbeddingConfig& cfg) {
  cfg.validate();
  if (!(dt > 0.0)) throw std::invalid_argument("rosenstein_mle: dt must be positive");
  const std::size_t win = series.size() / cfg.n_windows;
  LyapunovEstimate est;
  est.fit_begin = 1;
  est.fit_end = cfg.tlen;
  std::vector<double> kx;
  for (std::size_t k = 1; k <= cfg.tlen; ++k) kx.push_back(static_cast<double>(k) * dt);
  for (std::size_t w = 0; w < cfg.n_windows; ++w) {
    const Tensor y = delay_embed(series.subspan(w * win, win), cfg.m, cfg.tau);
    const auto curve = divergence_curve(y, cfg.m_sep, cfg.tlen);
    const std::vector<double> ky(curve.mean_log.begin() + 1, curve.mean_log.end());
    const Fit f = ols(kx, ky);
    est.window_lambdas.push_back(f.slope);
    est.window_r2.push_back(f.r2);
  }
  for (std::size_t w = 0; w < cfg.n_windows; ++w) {
    est.lambda_max += est.window_lambdas[w];
    est.r2 += est.window_r2[w];
  }
  est.lambda_max /= static_cast<double>(cfg.n_windows);
  est.r2 /= static_cast<double>(cfg.n_windows);
  return est;
}

LyapunovEstimate rosenstein_mle(const Tensor& trajectory, double dt, const EmbeddingConfig& cfg) {
  if (trajectory.rank() != 2 || trajectory.dim(1) == 0) {
    throw ShapeError("rosenstein_mle", "expected [L, D_s], got " + shape_str(trajectory.shape()));
  }
  std::vector<double> x(trajectory.dim(0));
  for (std::size_t l = 0; l < x.size(); ++l) x[l] = trajectory(l, 0);
  return rosenstein_mle(std::span<const double>(x), dt, cfg);
}

}  // namespace pidm
