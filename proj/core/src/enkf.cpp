#include "pidm/enkf.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace pidm {
namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<Matrix>;

MatrixMap as_matrix(Tensor& t) {
  return MatrixMap(t.data().data(), static_cast<Eigen::Index>(t.dim(0)),
                   static_cast<Eigen::Index>(t.dim(1)));
}

}  // namespace

void EnkfConfig::validate() const {
  if (n_members < 2) throw std::invalid_argument("EnkfConfig: n_members must be at least 2");
  if (inflation < 1.0) throw std::invalid_argument("EnkfConfig: inflation must be >= 1");
  if (!(prop_dt > 0.0)) throw std::invalid_argument("EnkfConfig: prop_dt must be positive");
  if (sigma_init < 0.0 || reg_eps < 0.0 || obs_sigma < 0.0 || deriv_clip <= 0.0) {
    throw std::invalid_argument("EnkfConfig: noise levels must be nonnegative");
  }
  if (state_clip && !(*state_clip > 0.0)) throw std::invalid_argument("EnkfConfig: state_clip must be positive");
}

EnkfConfig enkf_defaults(const SystemSpec& spec) {
  EnkfConfig cfg;
  if (spec.kind == SystemKind::Rabinovich) cfg.state_clip = 50.0;
  return cfg;
}

std::vector<double> rk4_step(const SystemSpec& spec, const std::vector<double>& x,
                             const std::vector<double>& params, double dt, double clip) {
  if (!(dt > 0.0)) throw std::invalid_argument("rk4_step: dt must be positive");
  return rk4_step_with([&](const std::vector<double>& s) { return field(spec, s, params); }, x, dt,
                       clip);
}

std::vector<double> Ensemble::mean() const {
  std::vector<double> m(dim(), 0.0);
  for (std::size_t i = 0; i < size(); ++i)
    for (std::size_t d = 0; d < dim(); ++d) m[d] += members(i, d);
  for (double& v : m) v /= static_cast<double>(size());
  return m;
}

Tensor Ensemble::anomalies() const {
  const auto m = mean();
  Tensor a(members.shape());
  for (std::size_t i = 0; i < size(); ++i)
    for (std::size_t d = 0; d < dim(); ++d) a(i, d) = members(i, d) - m[d];
  return a;
}

void Ensemble::inflate(double factor) {
  const auto m = mean();
  for (std::size_t i = 0; i < size(); ++i)
    for (std::size_t d = 0; d < dim(); ++d) members(i, d) = m[d] + factor * (members(i, d) - m[d]);
}

void analysis(Ensemble& ens, const std::vector<double>& y, const std::vector<double>& r_diag,
              double inflation, double reg_eps, Rng& rng) {
  const auto ne = static_cast<Eigen::Index>(ens.size());
  const auto d = static_cast<Eigen::Index>(ens.dim());
  const auto m = static_cast<Eigen::Index>(y.size());
  if (m == 0 || m > d || r_diag.size() != y.size()) {
    throw ShapeError("enkf_analysis", Shape{y.size(), r_diag.size()}, Shape{ens.dim()});
  }
  ens.inflate(inflation);
  Tensor anom = ens.anomalies();
  const Matrix a = as_matrix(anom);
  Matrix p = a.transpose() * a / static_cast<double>(ne - 1);
  p.diagonal().array() += reg_eps;
  Matrix s = p.topLeftCorner(m, m);
  for (Eigen::Index i = 0; i < m; ++i) s(i, i) += r_diag[static_cast<std::size_t>(i)];
  const Eigen::LLT<Matrix> llt(s);
  if (llt.info() != Eigen::Success) {
    throw std::runtime_error("enkf_analysis: innovation covariance is not positive definite");
  }
  const Matrix gain = llt.solve(p.leftCols(m).transpose()).transpose();  // [D, m]

  auto x = as_matrix(ens.members);
  std::normal_distribution<double> noise(0.0, 1.0);
  Eigen::VectorXd innov(m);
  for (Eigen::Index i = 0; i < ne; ++i) {
    for (Eigen::Index k = 0; k < m; ++k) {
      const auto uk = static_cast<std::size_t>(k);
      innov(k) = y[uk] + std::sqrt(r_diag[uk]) * noise(rng) - x(i, k);
    }
    x.row(i) += (gain * innov).transpose();
  }
}

EnkfResult run_filter(const SystemSpec& spec, const ObservationSet& obs, const NormStats& stats,
                      const ParamVector& params, double dt, const EnkfConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t ds = spec.state_dim, dp = spec.param_dim;
  const std::size_t len = obs.length();
  if (obs.y.shape() != Shape{ds, len}) throw ShapeError("run_filter", obs.y.shape(), Shape{ds, len});
  if (stats.channels() != spec.channels()) {
    throw ShapeError("run_filter", Shape{stats.channels()}, Shape{spec.channels()});
  }
  if (params.size() != dp) throw ShapeError("run_filter", Shape{params.size()}, Shape{dp});
  const auto idx = obs.indices();
  if (idx.empty()) throw std::invalid_argument("run_filter: no observations");

  // Observations and their noise in physical units.
  Tensor y_phys(Shape{ds, len});
  std::vector<double> r_diag(ds);
  for (std::size_t c = 0; c < ds; ++c) {
    const double half = 0.5 * stats.scale(c);
    r_diag[c] = std::max(cfg.obs_sigma * half, 1e-12);
    r_diag[c] *= r_diag[c];
    for (std::size_t l = 0; l < len; ++l) y_phys(c, l) = (obs.y(c, l) + 1.0) * half + stats.z_min[c];
  }

  const std::size_t cols = cfg.augment_params ? ds + dp : ds;
  const std::size_t ne = cfg.n_members;
  std::normal_distribution<double> noise(0.0, 1.0);

  std::vector<double> center(cols, 0.0);
  for (std::size_t c = 0; c < ds; ++c) {
    for (std::size_t l : idx) center[c] += y_phys(c, l);
    center[c] /= static_cast<double>(idx.size());
  }
  std::vector<double> param_sd(dp, 0.0);
  for (std::size_t p = 0; p < dp; ++p) {
    param_sd[p] = cfg.param_noise_frac * spec.id_box[p].width();
    if (cfg.augment_params) center[ds + p] = params[p];
  }

  auto clip_member = [&](Ensemble& ens, std::size_t i) {
    if (!cfg.state_clip) return;
    for (std::size_t c = 0; c < ds; ++c) {
      ens.members(i, c) = std::clamp(ens.members(i, c), -*cfg.state_clip, *cfg.state_clip);
    }
  };
  auto draw_member = [&](Ensemble& ens, std::size_t i, const std::vector<double>& mu) {
    for (std::size_t c = 0; c < ds; ++c) ens.members(i, c) = mu[c] + cfg.sigma_init * noise(rng);
    for (std::size_t p = ds; p < cols; ++p) ens.members(i, p) = mu[p] + param_sd[p - ds] * noise(rng);
    clip_member(ens, i);
  };

  Ensemble ens{Tensor(Shape{ne, cols})};
  for (std::size_t i = 0; i < ne; ++i) draw_member(ens, i, center);

  EnkfResult res;
  res.mean = Tensor(Shape{len, ds});
  res.forecast_means = Tensor(Shape{idx.size(), ds});
  res.analysis_means = Tensor(Shape{idx.size(), ds});
  const std::size_t substeps =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(dt / cfg.prop_dt)));
  const double h = dt / static_cast<double>(substeps);

  auto track_max = [&]() {
    for (std::size_t i = 0; i < ne; ++i)
      for (std::size_t c = 0; c < ds; ++c)
        res.max_abs_state = std::max(res.max_abs_state, std::abs(ens.members(i, c)));
  };
  track_max();

  std::vector<double> x(ds), p(params.values);
  std::vector<bool> healthy(ne);
  std::size_t next_obs = 0;
  for (std::size_t l = 0; l < len; ++l) {
    if (l > 0) {
      std::size_t n_healthy = 0;
      for (std::size_t i = 0; i < ne; ++i) {
        for (std::size_t c = 0; c < ds; ++c) x[c] = ens.members(i, c);
        if (cfg.augment_params)
          for (std::size_t q = 0; q < dp; ++q) p[q] = ens.members(i, ds + q);
        for (std::size_t s = 0; s < substeps; ++s) {
          x = rk4_step(spec, x, p, h, cfg.deriv_clip);
          if (cfg.state_clip)
            for (double& v : x) v = std::clamp(v, -*cfg.state_clip, *cfg.state_clip);
        }
        bool ok = true;
        for (double v : x) ok = ok && std::isfinite(v) && std::abs(v) <= cfg.blowup;
        healthy[i] = ok;
        n_healthy += ok;
        if (ok)
          for (std::size_t c = 0; c < ds; ++c) ens.members(i, c) = x[c];
      }
      if (n_healthy == 0) {
        throw std::runtime_error("enkf: every ensemble member blew up at step " + std::to_string(l));
      }
      if (n_healthy < ne) {
        std::vector<double> mu(cols, 0.0);
        for (std::size_t i = 0; i < ne; ++i)
          if (healthy[i])
            for (std::size_t c = 0; c < cols; ++c) mu[c] += ens.members(i, c);
        for (double& v : mu) v /= static_cast<double>(n_healthy);
        for (std::size_t i = 0; i < ne; ++i) {
          if (!healthy[i]) {
            draw_member(ens, i, mu);
            ++res.reinitialized;
          }
        }
      }
    }
    if (next_obs < idx.size() && idx[next_obs] == l) {
      const auto fm = ens.mean();
      for (std::size_t c = 0; c < ds; ++c) res.forecast_means(next_obs, c) = fm[c];
      std::vector<double> y(ds);
      for (std::size_t c = 0; c < ds; ++c) y[c] = y_phys(c, l);
      analysis(ens, y, r_diag, cfg.inflation, cfg.reg_eps, rng);
      for (std::size_t i = 0; i < ne; ++i) clip_member(ens, i);
      const auto am = ens.mean();
      for (std::size_t c = 0; c < ds; ++c) res.analysis_means(next_obs, c) = am[c];
      res.analysis_steps.push_back(l);
      ++next_obs;
    }
    track_max();
    const auto m = ens.mean();
    for (std::size_t c = 0; c < ds; ++c) res.mean(l, c) = m[c];
  }
  if (cfg.augment_params) {
    const auto m = ens.mean();
    res.param_mean.assign(m.begin() + static_cast<long>(ds), m.end());
  } else {
    res.param_mean = params.values;
  }
  return res;
}

}  // namespace pidm
