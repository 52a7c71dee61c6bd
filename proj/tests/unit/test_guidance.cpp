#include <gtest/gtest.h>

#include <cmath>

#include "fd.hpp"
#include "pidm/guidance.hpp"
#include "pidm/integrator.hpp"
#include "pidm/training.hpp"

using namespace pidm;

namespace {

TrajectorySet corpus_for(const SystemSpec& spec, std::size_t n, std::size_t len, std::uint64_t seed = 3) {
  CorpusOptions o;
  o.n_traj = n;
  o.length = len;
  o.transient = 300;
  o.seed = seed;
  return generate_corpus(spec, o);
}

Tensor state_rows(const Tensor& joint, std::size_t ds) {
  Tensor s(Shape{ds, joint.dim(1)});
  std::copy_n(joint.data().begin(), s.size(), s.data().begin());
  return s;
}

EpsFn oracle(const Tensor& x0, const NoiseSchedule& s) {
  return [x0, &s](const Tensor& x, std::size_t t) {
    const double ab = s.alpha_bar(t);
    Tensor e(x.shape());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = (x[i] - std::sqrt(ab) * x0[i]) / std::sqrt(1.0 - ab);
    return e;
  };
}

double l2(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

struct Fixture {
  const SystemSpec& spec;
  TrajectorySet corpus;
  NoiseSchedule schedule;
  ObservationSet obs;
  GuidanceProblem prob;

  Fixture(const std::string& name, std::size_t len, double density, double sigma, std::size_t T = 50)
      : spec(system_by_name(name)), corpus(corpus_for(spec, 4, len)), schedule(NoiseSchedule::scaled_linear(T)) {
    Rng rng(4);
    obs = make_observations(state_rows(corpus.trajectory(0), spec.state_dim), density, sigma, rng);
    prob.spec = &spec;
    prob.stats = &corpus.stats;
    prob.obs = &obs;
    prob.schedule = &schedule;
    prob.cfg.lambda_base = spec.lambda_base;
  }
};

}  // namespace

TEST(RecoverX0, ExactInversionClampAndSlope) {
  const auto s = NoiseSchedule::scaled_linear(100);
  const Tensor x0 = pidm::testing::random_tensor(Shape{3, 6}, 1, -3.0, 3.0);
  const Tensor eps = pidm::testing::random_tensor(Shape{3, 6}, 2);
  const Tensor xt = q_sample(x0, 60, eps, s);
  Tape tape;
  const Var X = tape.leaf(xt);
  const Var rec = recover_x0(X, 60, eps, s, 3.0);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(rec.value()[i], x0[i], 1e-12);
  tape.backward(sum(rec));
  const Tensor grad = tape.grad(X);
  for (double g : grad.data()) EXPECT_NEAR(g, 1.0 / std::sqrt(s.alpha_bar(60)), 1e-12);

  Tape t2;
  const Var big = recover_x0(t2.leaf(Tensor(Shape{2}, 50.0)), 10, Tensor(Shape{2}), s, 3.0);
  EXPECT_DOUBLE_EQ(big.value()[0], 3.0);
  const Var small = recover_x0(t2.leaf(Tensor(Shape{2}, -50.0)), 10, Tensor(Shape{2}), s, 3.0);
  EXPECT_DOUBLE_EQ(small.value()[1], -3.0);
}

TEST(PoolParams, MeanOfParameterRows) {
  Tape tape;
  Tensor joint(Shape{4, 5});
  for (std::size_t l = 0; l < 5; ++l) {
    joint(0, l) = 9.0;
    joint(2, l) = 0.25;
    joint(3, l) = static_cast<double>(l + 1);
  }
  const Var J = tape.leaf(joint);
  const Var p = pool_params(J, 2);
  EXPECT_EQ(p.shape(), (Shape{2}));
  EXPECT_DOUBLE_EQ(p.value()[0], 0.25);
  EXPECT_DOUBLE_EQ(p.value()[1], 3.0);
  tape.backward(sum(p * tape.constant(Tensor::vector({2.0, -1.0}))));
  const Tensor g = tape.grad(J);
  EXPECT_DOUBLE_EQ(g(0, 3), 0.0);
  EXPECT_DOUBLE_EQ(g(2, 1), 2.0 / 5.0);
  EXPECT_DOUBLE_EQ(g(3, 4), -1.0 / 5.0);
  EXPECT_THROW(pool_params(J, 4), ShapeError);
}

TEST(PhysicsLoss, ZeroOnSelfConsistentRollout) {
  for (const auto& spec : all_systems()) {
    const ParamVector p = canonical_params(spec);
    Rng rng(1);
    const auto x0 = sample_initial_state(spec, p, rng);
    const double dt = spec.kind == SystemKind::Rabinovich ? 0.001 : 0.05;
    const Tensor traj = dp45_rollout(spec, x0, p, dt, 12, 1);
    Tape tape;
    const Var l = physics_loss(tape.constant(traj), tape.constant(Tensor::vector(p.values)), spec, dt);
    EXPECT_LT(l.item(), 1e-20) << spec.name;
  }
}

TEST(PhysicsLoss, MonotoneInPerturbationAndLogScale) {
  const auto& spec = system_by_name("lorenz");
  const ParamVector p = canonical_params(spec);
  const Tensor traj = dp45_rollout(spec, std::vector<double>{1.0, 2.0, 20.0}, p, 0.05, 10, 1);
  double prev = -1.0;
  for (double delta : {0.0, 1e-3, 1e-2, 1e-1}) {
    Tensor s = traj;
    s(5, 1) += delta;
    Tape tape;
    const double l = physics_loss(tape.constant(s), tape.constant(Tensor::vector(p.values)), spec, 0.05).item();
    EXPECT_GT(l, prev) << delta;
    prev = l;
  }
  // log1p keeps residuals far below machine epsilon.
  {
    Tensor s = traj;
    s(5, 1) += 1e-12;
    Tape tape;
    EXPECT_GT(physics_loss(tape.constant(s), tape.constant(Tensor::vector(p.values)), spec, 0.05).item(), 0.0);
  }
  // Two states whose residual is sqrt(e - 1) in every component: MSE = e - 1, loss = 1.
  Tensor two(Shape{2, 3});
  const Tensor next = dp45_step(spec, Tensor::vector({1.0, 2.0, 20.0}), p, 0.05);
  for (std::size_t c = 0; c < 3; ++c) {
    two(0, c) = std::vector<double>{1.0, 2.0, 20.0}[c];
    two(1, c) = next[c] + std::sqrt(std::exp(1.0) - 1.0);
  }
  Tape tape;
  EXPECT_NEAR(physics_loss(tape.constant(two), tape.constant(Tensor::vector(p.values)), spec, 0.05).item(), 1.0, 1e-12);
  EXPECT_THROW(physics_loss(tape.constant(Tensor(Shape{1, 3})), tape.constant(Tensor::vector(p.values)), spec, 0.05),
               ShapeError);
}

TEST(DataLoss, MaskedStateError) {
  ObservationSet obs;
  obs.mask = {0, 1, 0, 0};
  obs.y = Tensor(Shape{3, 4});
  obs.y(0, 1) = 0.5;
  Tensor x(Shape{5, 4});
  x(0, 1) = 0.6;
  x(0, 0) = 7.0;  // unobserved
  x(4, 1) = 9.0;  // parameter channel
  Tape tape;
  EXPECT_NEAR(data_loss(tape.constant(x), obs, 3).item(), 0.01, 1e-15);
  x(0, 1) = 0.5;
  EXPECT_DOUBLE_EQ(data_loss(tape.constant(x), obs, 3).item(), 0.0);
  obs.mask = {0, 0, 0, 0};
  EXPECT_THROW(data_loss(tape.constant(x), obs, 3), std::invalid_argument);
}

TEST(LambdaSchedule, LinearRamp) {
  EXPECT_EQ(lambda_schedule(200, 200, 2.0), 0.0);
  EXPECT_EQ(lambda_schedule(0, 200, 2.0), 2.0);
  EXPECT_DOUBLE_EQ(lambda_schedule(100, 200, 2.0), 1.0);
  EXPECT_THROW(lambda_schedule(201, 200, 2.0), std::out_of_range);
}

TEST(SafeProject, ClipPreserveAndAbort) {
  GuidanceConfig cfg;
  const Tensor big = Tensor::vector({6.0, 8.0});
  EXPECT_NEAR(l2(safe_project(big, 1.0, cfg)), 0.15, 1e-9);
  const Tensor g = safe_project(big, 1.0, cfg);
  EXPECT_NEAR(g[0] / g[1], 0.75, 1e-12);
  EXPECT_NEAR(l2(safe_project(Tensor::vector({0.006, 0.008}), 1.0, cfg)), 0.01, 1e-7);
  EXPECT_EQ(l2(safe_project(big, 1e5, cfg)), 0.0);
}

TEST(GuidanceConfig, Validation) {
  GuidanceConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.g_thresh = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = GuidanceConfig{};
  cfg.w_data = -1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Sample, ZeroLambdaIsBitIdenticalToDdpm) {
  Fixture f("lorenz", 16, 0.25, 0.05, 40);
  f.prob.cfg.lambda_base = 0.0;
  const Denoiser net(DenoiserConfig{6, 8, {1, 2, 4}, 16, 4, false, 16}, 3);
  auto eps = [&](const Tensor& x, std::size_t t) { return net.predict(x, t); };
  Rng a(77), b(77);
  const SampleOutcome out = sample(eps, f.prob, a);
  const Tensor ref = ddpm_sample(f.schedule, eps, Shape{6, 16}, b, f.prob.cfg.reverse_clip);
  EXPECT_EQ(out.x0_hat, ref);
  EXPECT_EQ(a, b);
  EXPECT_EQ(out.guided_steps, 0u);
  EXPECT_EQ(out.trace.size(), 40u);
}

TEST(Sample, CorrectionNormBoundedAndScheduleApplied) {
  Fixture f("lorenz", 16, 0.25, 0.05, 40);
  const Denoiser net(DenoiserConfig{6, 8, {1, 2, 4}, 16, 4, false, 16}, 3);
  f.prob.eps_on_tape = [&](Tape& tape, const Var& x, std::size_t t) { return net.predict_on(tape, x, t); };
  Rng rng(5);
  const SampleOutcome out = sample([&](const Tensor& x, std::size_t t) { return net.predict(x, t); }, f.prob, rng);
  ASSERT_EQ(out.trace.size(), 40u);
  EXPECT_EQ(out.trace.front().t, 40u);
  EXPECT_EQ(out.trace.front().lambda, 0.0);
  EXPECT_FALSE(out.trace.front().guided);
  EXPECT_EQ(out.guided_steps, 39u);
  for (const auto& e : out.trace) {
    EXPECT_LE(e.correction_norm, 0.15 + 1e-12);
    EXPECT_NEAR(e.lambda, 2.0 * (1.0 - e.t / 40.0), 1e-15);
  }
  EXPECT_LE(out.fallback_count, out.guided_steps);
  EXPECT_EQ(out.p_hat.size(), 3u);
}

TEST(Sample, OracleDenoiserWithDenseObservations) {
  Fixture f("lorenz", 128, 1.0, 0.0, 200);
  const Tensor truth = f.corpus.trajectory(0);
  Rng rng(8);
  const SampleOutcome out = sample(oracle(truth, f.schedule), f.prob, rng);
  double sq = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) sq += std::pow(out.x0_hat[i] - truth[i], 2);
  EXPECT_LT(std::sqrt(sq / truth.size()), 0.05);
  EXPECT_EQ(out.fallback_count, 0u);
}

TEST(Sample, FaultHookCountsFallbacks) {
  Fixture f("rossler", 16, 0.25, 0.05, 30);
  std::size_t faulted = 0;
  f.prob.fault = [&](std::size_t t) {
    const bool hit = t % 3 == 0 && t < 30;
    faulted += hit;
    return hit;
  };
  const Tensor truth = f.corpus.trajectory(1);
  Rng rng(2);
  const SampleOutcome out = sample(oracle(truth, f.schedule), f.prob, rng);
  EXPECT_EQ(out.fallback_count, faulted);
  EXPECT_GT(faulted, 0u);
  for (const auto& e : out.trace) {
    if (e.fallback) EXPECT_EQ(e.correction_norm, 0.0);
  }
}

TEST(Sample, MissingComponentsRejectedUpfront) {
  Fixture f("lorenz", 16, 0.25, 0.05, 10);
  GuidanceProblem p = f.prob;
  p.stats = nullptr;
  Rng rng(1);
  auto zero = [](const Tensor& x, std::size_t) { return Tensor(x.shape()); };
  EXPECT_THROW(sample(zero, p, rng), std::invalid_argument);
  p = f.prob;
  p.cfg.g_thresh = -1.0;
  EXPECT_THROW(sample(zero, p, rng), std::invalid_argument);
}

TEST(GuidanceObjective, FirstOrderDescent) {
  Fixture f("lorenz", 32, 0.2, 0.05, 100);
  const Tensor truth = f.corpus.trajectory(2);
  Rng rng(31);
  std::size_t decreased = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t t = 1 + static_cast<std::size_t>(uniform(rng, 0.0, 99.0));
    const Tensor eps = randn(truth.shape(), rng);
    const Tensor x = q_sample(truth, t, eps, f.schedule);
    const double lambda = lambda_schedule(t, 100, 2.0);
    const GuidanceEval before = guidance_objective(f.prob, x, t, eps, lambda);
    const Tensor g = safe_project(before.grad, before.l_phy, f.prob.cfg);
    Tensor moved = x;
    for (std::size_t i = 0; i < x.size(); ++i) moved[i] -= 0.01 * g[i];
    const GuidanceEval after = guidance_objective(f.prob, moved, t, eps, lambda);
    decreased += after.l_total <= before.l_total;
  }
  EXPECT_GE(decreased, 18u);
}

TEST(GuidanceObjective, PhysicsChainGradientAllSystems) {
  for (const auto& spec : all_systems()) {
    const auto corpus = corpus_for(spec, 3, 8);
    const auto s = NoiseSchedule::scaled_linear(50);
    const Tensor truth = corpus.trajectory(0);
    // eps_hat differs from the noise that made x, so x0_hat sits off the truth and the residual is O(1).
    const Tensor eps = pidm::testing::random_tensor(truth.shape(), 4);
    const Tensor x = q_sample(truth, 3, pidm::testing::random_tensor(truth.shape(), 5), s);
    auto chain = [&](Tape& tape, const Var& X) {
      const Var x0 = recover_x0(X, 3, eps, s, 3.0);
      const Var phys = denormalize(x0, corpus.stats);
      const Var states = transpose(slice(phys, 0, 0, spec.state_dim));
      return physics_loss(states, pool_params(phys, spec.state_dim), spec, 0.05);
    };
    EXPECT_LT(pidm::testing::gradient_error(chain, x, 1e-6), 1e-4) << spec.name;
  }
}

TEST(GuidanceObjective, GradientThroughDenoiserMatchesFiniteDifferences) {
  Fixture f("lorenz", 8, 0.5, 0.05, 20);
  const Denoiser net(DenoiserConfig{6, 8, {1, 2, 4}, 16, 4, false, 8}, 3);
  f.prob.eps_on_tape = [&](Tape& tape, const Var& x, std::size_t t) { return net.predict_on(tape, x, t); };
  const Tensor x = q_sample(f.corpus.trajectory(0), 4, pidm::testing::random_tensor(Shape{6, 8}, 9), f.schedule);
  const Tensor unused(Shape{6, 8});
  const GuidanceEval ev = guidance_objective(f.prob, x, 4, unused, 1.0);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); i += 5) {
    Tensor xp = x, xm = x;
    xp[i] += 1e-6;
    xm[i] -= 1e-6;
    const double fd = (guidance_objective(f.prob, xp, 4, unused, 1.0).l_total -
                       guidance_objective(f.prob, xm, 4, unused, 1.0).l_total) / 2e-6;
    worst = std::max(worst, std::abs(fd - ev.grad[i]) / std::max(1.0, std::abs(fd)));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(PooledParams, PhysicalTimeMean) {
  const auto corpus = corpus_for(system_by_name("lorenz"), 2, 8);
  const auto p = pooled_params(corpus.trajectory(1), corpus.stats, 3);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[i], corpus.params(1, i), 1e-9);
}
