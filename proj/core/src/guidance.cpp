#include "pidm/guidance.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "pidm/integrator.hpp"

namespace pidm {

void GuidanceConfig::validate() const {
  if (lambda_base < 0.0 || w_data < 0.0 || eps_norm < 0.0 || phy_abort < 0.0 || x0_clamp < 0.0 ||
      reverse_clip < 0.0) {
    throw std::invalid_argument("GuidanceConfig: weights and thresholds must be nonnegative");
  }
  if (!(g_thresh > 0.0)) throw std::invalid_argument("GuidanceConfig: g_thresh must be positive");
}

Var recover_x0(const Var& x_t, std::size_t t, const Tensor& eps_hat, const NoiseSchedule& s,
               double clamp_at) {
  if (x_t.shape() != eps_hat.shape()) throw ShapeError("recover_x0", x_t.shape(), eps_hat.shape());
  const double ab = s.alpha_bar(t);
  Tensor offset(eps_hat.shape());
  const double k = std::sqrt(1.0 - ab);
  for (std::size_t i = 0; i < offset.size(); ++i) offset[i] = k * eps_hat[i];
  const Var raw = (x_t - x_t.tape()->constant(std::move(offset))) * (1.0 / std::sqrt(ab));
  return clamp(raw, -clamp_at, clamp_at);
}

Var recover_x0(const Var& x_t, std::size_t t, const Var& eps_hat, const NoiseSchedule& s, double clamp_at) {
  if (x_t.shape() != eps_hat.shape()) throw ShapeError("recover_x0", x_t.shape(), eps_hat.shape());
  const double ab = s.alpha_bar(t);
  const Var raw = (x_t - eps_hat * std::sqrt(1.0 - ab)) * (1.0 / std::sqrt(ab));
  return clamp(raw, -clamp_at, clamp_at);
}

Var pool_params(const Var& joint, std::size_t state_dim) {
  const Shape& s = joint.shape();
  if (s.size() != 2 || s[0] <= state_dim) {
    throw ShapeError("pool_params", "expected [D_s + D_p, L] with D_s = " + std::to_string(state_dim) +
                                        ", got " + shape_str(s));
  }
  return mean(slice(joint, 0, state_dim, s[0]), 1);
}

Var physics_loss(const Var& states, const Var& p_hat, const SystemSpec& spec, double dt) {
  const Shape& s = states.shape();
  if (s.size() != 2 || s[1] != spec.state_dim) {
    throw ShapeError("physics_loss", s, Shape{0, spec.state_dim});
  }
  if (s[0] < 2) throw ShapeError("physics_loss", "need at least two time steps, got " + shape_str(s));
  const Var advanced = dp45_step(spec, slice(states, 0, 0, s[0] - 1), p_hat, dt);
  return log1p(mse(advanced, slice(states, 0, 1, s[0])));
}

Var data_loss(const Var& x0_hat, const ObservationSet& obs, std::size_t state_dim) {
  const std::size_t n_obs = obs.count();
  if (n_obs == 0) throw std::invalid_argument("data_loss: observation mask is empty");
  const Shape& s = x0_hat.shape();
  const std::size_t len = obs.length();
  if (s.size() != 2 || s[0] < state_dim || s[1] != len) {
    throw ShapeError("data_loss", s, Shape{state_dim, len});
  }
  if (obs.y.shape() != Shape{state_dim, len}) throw ShapeError("data_loss", obs.y.shape(), Shape{state_dim, len});
  Tensor mask(Shape{state_dim, len});
  for (std::size_t c = 0; c < state_dim; ++c)
    for (std::size_t l = 0; l < len; ++l) mask(c, l) = obs.mask[l] ? 1.0 : 0.0;
  Tape& tape = *x0_hat.tape();
  const Var diff = (slice(x0_hat, 0, 0, state_dim) - tape.constant(obs.y)) * tape.constant(std::move(mask));
  return sum(square(diff)) * (1.0 / static_cast<double>(n_obs));
}

double lambda_schedule(std::size_t t, std::size_t T, double lambda_base) {
  if (T == 0 || t > T) throw std::out_of_range("lambda_schedule: need 0 <= t <= T");
  return lambda_base * (1.0 - static_cast<double>(t) / static_cast<double>(T));
}

Tensor safe_project(const Tensor& g, double l_phy, const GuidanceConfig& cfg) {
  Tensor out(g.shape());
  if (l_phy > cfg.phy_abort) return out;
  double sq = 0.0;
  for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  const double k = std::min(norm, cfg.g_thresh) / (norm + cfg.eps_norm);
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i] * k;
  return out;
}

GuidanceEval guidance_objective(const GuidanceProblem& prob, const Tensor& x, std::size_t t_prev,
                                const Tensor& eps_hat, double lambda, bool inject_fault) {
  const SystemSpec& spec = *prob.spec;
  const std::size_t ds = spec.state_dim;
  Tape tape;
  const Var X = tape.leaf(x);
  const Var x0 = prob.eps_on_tape && t_prev >= 1
                     ? recover_x0(X, t_prev, prob.eps_on_tape(tape, X, t_prev), *prob.schedule, prob.cfg.x0_clamp)
                     : recover_x0(X, t_prev, eps_hat, *prob.schedule, prob.cfg.x0_clamp);
  const Var phys = denormalize(x0, *prob.stats);
  const Var states = transpose(slice(phys, 0, 0, ds));
  const Var p_hat = pool_params(phys, ds);
  Var l_phy = physics_loss(states, p_hat, spec, prob.dt);
  if (inject_fault) l_phy = l_phy * tape.constant(Tensor::scalar(std::numeric_limits<double>::quiet_NaN()));
  const Var l_data = data_loss(x0, *prob.obs, ds);
  const Var total = l_data * prob.cfg.w_data + l_phy * lambda;
  tape.backward(total);
  return GuidanceEval{l_data.item(), l_phy.item(), total.item(), tape.grad(X)};
}

namespace {

double l2(const Tensor& t) {
  double sq = 0.0;
  for (double v : t.data()) sq += v * v;
  return std::sqrt(sq);
}

void check_problem(const GuidanceProblem& prob) {
  if (!prob.spec || !prob.stats || !prob.obs || !prob.schedule) {
    throw std::invalid_argument("sample: guidance problem is missing a component");
  }
  prob.cfg.validate();
  if (prob.stats->channels() != prob.spec->channels()) {
    throw ShapeError("sample", Shape{prob.stats->channels()}, Shape{prob.spec->channels()});
  }
  if (prob.obs->y.shape() != Shape{prob.spec->state_dim, prob.obs->length()}) {
    throw ShapeError("sample", prob.obs->y.shape(), Shape{prob.spec->state_dim, prob.obs->length()});
  }
  if (prob.cfg.lambda_base > 0.0 && prob.obs->count() == 0) {
    throw std::invalid_argument("sample: guided sampling needs at least one observation");
  }
}

}  // namespace

SampleOutcome sample(const EpsFn& eps, const GuidanceProblem& prob, Rng& rng) {
  check_problem(prob);
  const NoiseSchedule& s = *prob.schedule;
  const std::size_t T = s.steps();
  SampleOutcome out;
  out.trace.reserve(T);
  Tensor x = randn(Shape{prob.spec->channels(), prob.obs->length()}, rng);
  for (std::size_t t = T; t >= 1; --t) {
    const Tensor e = eps(x, t);
    Tensor x_prev = reverse_step(x, t, e, s, rng, prob.cfg.reverse_clip);
    GuidanceTraceEntry entry;
    entry.t = t;
    entry.lambda = lambda_schedule(t, T, prob.cfg.lambda_base);
    if (entry.lambda > 0.0) {
      entry.guided = true;
      ++out.guided_steps;
      try {
        const bool fault = prob.fault && prob.fault(t);
        const GuidanceEval ev = guidance_objective(prob, x_prev, t - 1, e, entry.lambda, fault);
        const Tensor g_safe = safe_project(ev.grad, ev.l_phy, prob.cfg);
        for (std::size_t i = 0; i < x_prev.size(); ++i) x_prev[i] -= g_safe[i];
        entry.l_data = ev.l_data;
        entry.l_phy = ev.l_phy;
        entry.g_norm = l2(ev.grad);
        entry.correction_norm = l2(g_safe);
      } catch (const std::exception&) {
        entry.fallback = true;
        ++out.fallback_count;
      }
    }
    out.trace.push_back(entry);
    x = std::move(x_prev);
  }
  out.p_hat = pooled_params(x, *prob.stats, prob.spec->state_dim);
  out.x0_hat = std::move(x);
  return out;
}

std::vector<double> pooled_params(const Tensor& joint, const NormStats& stats, std::size_t state_dim) {
  const Tensor phys = denormalize(joint, stats);
  const std::size_t nc = phys.dim(0), len = phys.dim(1);
  std::vector<double> p;
  for (std::size_t c = state_dim; c < nc; ++c) {
    double acc = 0.0;
    for (std::size_t l = 0; l < len; ++l) acc += phys(c, l);
    p.push_back(acc / static_cast<double>(len));
  }
  return p;
}

}  // namespace pidm
