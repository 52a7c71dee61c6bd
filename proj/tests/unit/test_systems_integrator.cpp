#include <gtest/gtest.h>

#include <cmath>

#include "fd.hpp"
#include "pidm/integrator.hpp"

using namespace pidm;

namespace {

// Dormand-Prince fifth-order coefficients, written out independently of the library.
struct Rational {
  double num, den;
  double value() const { return num / den; }
};

const Rational kA[6][5] = {
    {},
    {{1, 5}},
    {{3, 40}, {9, 40}},
    {{44, 45}, {-56, 15}, {32, 9}},
    {{19372, 6561}, {-25360, 2187}, {64448, 6561}, {-212, 729}},
    {{9017, 3168}, {-355, 33}, {46732, 5247}, {49, 176}, {-5103, 18656}},
};
const Rational kB[6] = {{35, 384}, {0, 1}, {500, 1113}, {125, 192}, {-2187, 6784}, {11, 84}};
const Rational kC[6] = {{0, 1}, {1, 5}, {3, 10}, {4, 5}, {8, 9}, {1, 1}};

// States after a transient, so gradient checks run on the attractor.
std::vector<std::vector<double>> attractor_states(const SystemSpec& spec, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  const ParamVector p = canonical_params(spec);
  const auto x0 = sample_initial_state(spec, p, rng);
  const Tensor traj = dp45_rollout(spec, x0, p, 0.05, 400 + count * 7, spec.groundtruth_substeps);
  std::vector<std::vector<double>> out;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t row = 400 + 7 * k;
    out.emplace_back(traj.data().begin() + static_cast<std::ptrdiff_t>(row * spec.state_dim),
                     traj.data().begin() + static_cast<std::ptrdiff_t>((row + 1) * spec.state_dim));
  }
  return out;
}

}  // namespace

TEST(Tableau, CoefficientsMatchRationals) {
  const auto& tab = dormand_prince_tableau();
  std::size_t entries = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_LT(std::abs(tab.c[i] - kC[i].value()), 1e-14) << "c" << i;
    EXPECT_LT(std::abs(tab.b[i] - kB[i].value()), 1e-14) << "b" << i;
    ++entries;
    for (std::size_t j = 0; j < i; ++j) {
      EXPECT_LT(std::abs(tab.a[i][j] - kA[i][j].value()), 1e-14) << "a" << i << j;
      ++entries;
    }
  }
  EXPECT_EQ(entries, 21u);
}

TEST(Tableau, RowSumsEqualNodes) {
  const auto& tab = dormand_prince_tableau();
  double b_sum = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < i; ++j) s += tab.a[i][j];
    EXPECT_LT(std::abs(s - tab.c[i]), 1e-15) << "row " << i;
    b_sum += tab.b[i];
  }
  EXPECT_LT(std::abs(b_sum - 1.0), 1e-15);
}

TEST(Systems, LookupAndDimensions) {
  EXPECT_EQ(all_systems().size(), 5u);
  EXPECT_EQ(system_by_name("lorenz96").state_dim, 20u);
  EXPECT_EQ(system_by_name("hyper5d").channels(), 8u);
  EXPECT_EQ(system_by_name("rabinovich").param_dim, 2u);
  EXPECT_THROW(system_by_name("duffing"), std::invalid_argument);
  EXPECT_THROW(make_params(system_by_name("lorenz"), {1.0, 2.0}), std::invalid_argument);
  EXPECT_EQ(parse_condition("ood"), Condition::OOD);
  EXPECT_THROW(parse_condition("mid"), std::invalid_argument);
}

TEST(Systems, FieldsAtHandEvaluatedPoints) {
  const Tensor ones = Tensor::vector({1.0, 1.0, 1.0});
  const auto& lorenz = system_by_name("lorenz");
  const Tensor fl = eval_field(lorenz, ones, canonical_params(lorenz));
  EXPECT_DOUBLE_EQ(fl[0], 0.0);
  EXPECT_DOUBLE_EQ(fl[1], 26.0);
  EXPECT_NEAR(fl[2], -5.0 / 3.0, 1e-15);
  const auto& rab = system_by_name("rabinovich");
  const Tensor fr = eval_field(rab, ones, make_params(rab, {0.14, 0.10}));
  EXPECT_NEAR(fr[0], 1.1, 1e-15);
  EXPECT_NEAR(fr[1], 3.1, 1e-15);
  EXPECT_NEAR(fr[2], -2.28, 1e-15);
  const auto& l96 = system_by_name("lorenz96");
  const Tensor f96 = eval_field(l96, Tensor(Shape{20}), canonical_params(l96));
  for (double v : f96.data()) EXPECT_EQ(v, 8.0);
}

TEST(Systems, Lorenz96IsRotationEquivariant) {
  const auto& spec = system_by_name("lorenz96");
  Rng rng(3);
  Tensor x(Shape{20});
  for (double& v : x.data()) v = uniform(rng, -5.0, 5.0);
  const Tensor f = eval_field(spec, x, canonical_params(spec));
  for (std::size_t k : {1u, 7u}) {
    Tensor r(Shape{20});
    for (std::size_t j = 0; j < 20; ++j) r[(j + k) % 20] = x[j];
    const Tensor fr = eval_field(spec, r, canonical_params(spec));
    for (std::size_t j = 0; j < 20; ++j) EXPECT_DOUBLE_EQ(fr[(j + k) % 20], f[j]);
  }
}

TEST(Systems, JacobianStructure) {
  const auto& lorenz = system_by_name("lorenz");
  const auto p = canonical_params(lorenz);
  Rng rng(8);
  for (int k = 0; k < 5; ++k) {
    const Tensor x = Tensor::vector({uniform(rng, -20, 20), uniform(rng, -20, 20), uniform(rng, 0, 40)});
    const Tensor j = eval_jacobian(lorenz, x, p);
    EXPECT_EQ(j(0, 0), -10.0);
    EXPECT_EQ(j(0, 1), 10.0);
    EXPECT_EQ(j(0, 2), 0.0);
    // Trace of the Jacobian is the divergence of the field: -(sigma + 1 + beta).
    EXPECT_NEAR(j(0, 0) + j(1, 1) + j(2, 2), -(10.0 + 1.0 + 8.0 / 3.0), 1e-12);
  }
  const auto& l96 = system_by_name("lorenz96");
  Tensor x(Shape{20});
  for (double& v : x.data()) v = uniform(rng, -5, 5);
  const Tensor j96 = eval_jacobian(l96, x, canonical_params(l96));
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(j96(i, i), -1.0);
}

TEST(Systems, ParameterDrawsAreSeeded) {
  const auto& lorenz = system_by_name("lorenz");
  Rng a(4), b(4);
  EXPECT_EQ(sample_params(lorenz, Condition::ID, a).values, sample_params(lorenz, Condition::ID, b).values);
  const auto& rab = system_by_name("rabinovich");
  for (int k = 0; k < 100; ++k) {
    const auto p = sample_params(rab, Condition::OOD, a);
    EXPECT_GE(p[0], 0.20);
    EXPECT_LE(p[0], 0.30);
    EXPECT_GE(p[1], 0.05);
    EXPECT_LE(p[1], 0.09);
    const auto q = sample_params(lorenz, Condition::ID, a);
    EXPECT_GE(q[0], 8.0);
    EXPECT_LE(q[0], 12.0);
  }
}

TEST(Systems, LorenzFieldAtKnownPoint) {
  const auto& spec = system_by_name("lorenz");
  const Tensor f = eval_field(spec, Tensor::vector({1.0, 2.0, 3.0}), canonical_params(spec));
  EXPECT_DOUBLE_EQ(f[0], 10.0);
  EXPECT_DOUBLE_EQ(f[1], 1.0 * (28.0 - 3.0) - 2.0);
  EXPECT_DOUBLE_EQ(f[2], 2.0 - 8.0);
}

TEST(Systems, Lorenz96RingIndexing) {
  const auto& spec = system_by_name("lorenz96");
  Tensor x(Shape{20});
  for (std::size_t i = 0; i < 20; ++i) x[i] = static_cast<double>(i);
  const Tensor f = eval_field(spec, x, canonical_params(spec));
  // j = 0 uses x_1, x_18, x_19.
  EXPECT_DOUBLE_EQ(f[0], (1.0 - 18.0) * 19.0 - 0.0 + 8.0);
  EXPECT_DOUBLE_EQ(f[5], (6.0 - 3.0) * 4.0 - 5.0 + 8.0);
}

TEST(Systems, JacobianMatchesFiniteDifferences) {
  for (const auto& spec : all_systems()) {
    const auto states = attractor_states(spec, 2, 5);
    const ParamVector p = canonical_params(spec);
    for (const auto& s : states) {
      const Tensor x = Tensor::vector(s);
      const Tensor jac = eval_jacobian(spec, x, p);
      for (std::size_t j = 0; j < spec.state_dim; ++j) {
        Tensor xp = x, xm = x;
        const double h = 1e-6 * std::max(1.0, std::abs(x[j]));
        xp[j] += h;
        xm[j] -= h;
        const Tensor fp = eval_field(spec, xp, p), fm = eval_field(spec, xm, p);
        for (std::size_t i = 0; i < spec.state_dim; ++i) {
          EXPECT_NEAR(jac(i, j), (fp[i] - fm[i]) / (2 * h), 1e-5 * std::max(1.0, std::abs(jac(i, j))))
              << spec.name;
        }
      }
    }
  }
}

TEST(Systems, ParameterDrawsRespectBoxes) {
  for (const auto& spec : all_systems()) {
    Rng rng(17);
    for (int k = 0; k < 200; ++k) {
      const ParamVector id = sample_params(spec, Condition::ID, rng);
      const ParamVector ood = sample_params(spec, Condition::OOD, rng);
      for (std::size_t i = 0; i < spec.param_dim; ++i) {
        EXPECT_TRUE(spec.id_box[i].contains(id[i])) << spec.name;
        if (!spec.ood_box.empty()) {
          EXPECT_TRUE(spec.ood_box[i].contains(ood[i])) << spec.name;
        } else {
          const double band = spec.ood_widening * spec.id_box[i].width();
          EXPECT_FALSE(spec.id_box[i].contains(ood[i]) && ood[i] != spec.id_box[i].lo &&
                       ood[i] != spec.id_box[i].hi)
              << spec.name;
          EXPECT_GE(ood[i], spec.id_box[i].lo - band);
          EXPECT_LE(ood[i], spec.id_box[i].hi + band);
        }
      }
    }
  }
}

TEST(Integrator, BatchedStepEqualsSingleStepsBitwise) {
  for (const auto& spec : all_systems()) {
    const auto states = attractor_states(spec, 4, 3);
    const ParamVector p = canonical_params(spec);
    Tensor batch(Shape{states.size(), spec.state_dim});
    for (std::size_t r = 0; r < states.size(); ++r)
      for (std::size_t c = 0; c < spec.state_dim; ++c) batch(r, c) = states[r][c];
    const Tensor stepped = dp45_step(spec, batch, p, 0.01);
    for (std::size_t r = 0; r < states.size(); ++r) {
      const Tensor single = dp45_step(spec, Tensor::vector(states[r]), p, 0.01);
      for (std::size_t c = 0; c < spec.state_dim; ++c) EXPECT_EQ(stepped(r, c), single[c]) << spec.name;
    }
  }
}

TEST(Integrator, TapeStepMatchesTensorStep) {
  const auto& spec = system_by_name("rossler");
  const auto states = attractor_states(spec, 3, 4);
  Tensor batch(Shape{3, 3});
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) batch(r, c) = states[r][c];
  const ParamVector p = canonical_params(spec);
  Tape tape;
  const Tensor viaTape = dp45_step(spec, tape.constant(batch), tape.constant(Tensor::vector(p.values)), 0.05).value();
  const Tensor direct = dp45_step(spec, batch, p, 0.05);
  for (std::size_t i = 0; i < direct.size(); ++i) EXPECT_NEAR(viaTape[i], direct[i], 1e-13);
}

TEST(Integrator, StateGradientMatchesFiniteDifferences) {
  for (const auto& spec : all_systems()) {
    const auto states = attractor_states(spec, 10, 21);
    const ParamVector p = canonical_params(spec);
    const double dt = spec.kind == SystemKind::Rabinovich ? 0.001 : 0.01;
    for (const auto& s : states) {
      auto f = [&](Tape& tape, const Var& x) {
        const Var y = dp45_step(spec, x, tape.constant(Tensor::vector(p.values)), dt);
        return sum(y * tape.constant(pidm::testing::random_tensor(y.shape(), 8)));
      };
      EXPECT_LT(pidm::testing::gradient_error(f, Tensor::vector(s), 1e-5), 1e-5) << spec.name;
    }
  }
}

TEST(Integrator, ParameterGradientMatchesFiniteDifferences) {
  for (const auto& spec : all_systems()) {
    const auto states = attractor_states(spec, 1, 2);
    const ParamVector p = canonical_params(spec);
    auto f = [&](Tape& tape, const Var& params) {
      return sum(dp45_step(spec, tape.constant(Tensor::vector(states[0])), params, 0.01));
    };
    EXPECT_LT(pidm::testing::gradient_error(f, Tensor::vector(p.values), 1e-6), 1e-5) << spec.name;
  }
}

TEST(Integrator, ExponentialGrowthToFifthOrder) {
  // y' = y over [0, 1]: error of h = 0.1 steps against e is O(h^5).
  auto rhs = [](const std::vector<double>& y) { return std::vector<double>{y[0]}; };
  std::vector<double> y{1.0};
  for (int i = 0; i < 10; ++i) y = dp45_step_with(rhs, y, 0.1);
  EXPECT_NEAR(y[0], std::exp(1.0), 5e-8);
  const double order = convergence_order_with(rhs, {1.0}, 1.0, 4);
  EXPECT_GT(order, 4.7);
}

TEST(Integrator, ConvergenceOrderOnChaoticSystems) {
  for (const char* name : {"lorenz", "rossler"}) {
    const auto& spec = system_by_name(name);
    const auto states = attractor_states(spec, 1, 9);
    for (double horizon : {0.5, 1.0}) {
      EXPECT_GE(convergence_order(spec, states[0], canonical_params(spec), horizon), 4.7) << name;
    }
  }
}

TEST(Integrator, SingleStepOracles) {
  auto rhs = [](const std::vector<double>& y) { return std::vector<double>{y[0]}; };
  EXPECT_NEAR(dp45_step_with(rhs, std::vector<double>{1.0}, 0.1)[0], 1.1051709180756477, 2e-8);
  const auto& spec = system_by_name("lorenz");
  const Tensor x = Tensor::vector({3.0, -2.0, 17.0});
  EXPECT_EQ(dp45_step(spec, x, canonical_params(spec), 0.0), x);
}

TEST(Integrator, MatchesScalarLorenzStep) {
  // Straight-line scalar DP5 step on Lorenz using the rational table above.
  auto f = [](const double* s, double* out) {
    out[0] = 10.0 * (s[1] - s[0]);
    out[1] = s[0] * (28.0 - s[2]) - s[1];
    out[2] = s[0] * s[1] - 8.0 / 3.0 * s[2];
  };
  const double dt = 0.05;
  const double x0[3] = {1.0, 1.0, 1.0};
  double k[6][3];
  for (int i = 0; i < 6; ++i) {
    double stage[3];
    for (int d = 0; d < 3; ++d) {
      stage[d] = x0[d];
      for (int j = 0; j < i; ++j) stage[d] += dt * kA[i][j].value() * k[j][d];
    }
    f(stage, k[i]);
  }
  const auto& spec = system_by_name("lorenz");
  const Tensor y = dp45_step(spec, Tensor::vector({1.0, 1.0, 1.0}), canonical_params(spec), dt);
  for (int d = 0; d < 3; ++d) {
    double expect = x0[d];
    for (int i = 0; i < 6; ++i) expect += dt * kB[i].value() * k[i][d];
    EXPECT_NEAR(y[static_cast<std::size_t>(d)], expect, 1e-13);
  }
}

TEST(Integrator, LinearSystemOrder) {
  // y' = -2y: a fifth-order method's global error ratio for halved steps tends to 2^5.
  auto rhs = [](const std::vector<double>& y) { return std::vector<double>{-2.0 * y[0]}; };
  auto err = [&](int n) {
    std::vector<double> y{1.0};
    for (int i = 0; i < n; ++i) y = dp45_step_with(rhs, y, 1.0 / n);
    return std::abs(y[0] - std::exp(-2.0));
  };
  EXPECT_NEAR(std::log2(err(32) / err(64)), 5.0, 0.15);
  EXPECT_GT(convergence_order_with(rhs, {1.0}, 1.0, 4), 4.7);
}

TEST(Integrator, LorenzStaysBounded) {
  const auto& spec = system_by_name("lorenz");
  Rng rng(6);
  std::vector<double> x0(3);
  for (double& v : x0) v = uniform(rng, -0.57, 0.57);
  const Tensor traj = dp45_rollout(spec, x0, canonical_params(spec), 0.05, 1700, spec.groundtruth_substeps);
  double peak = 0.0;
  for (double v : traj.data()) peak = std::max(peak, std::abs(v));
  EXPECT_LE(peak, 500.0);
  EXPECT_EQ(dp45_rollout(spec, x0, canonical_params(spec), 0.05, 0, 1).shape(), (Shape{1, 3}));
}

TEST(Integrator, RabinovichSubstepSelfConvergence) {
  const auto& spec = system_by_name("rabinovich");
  const auto p = canonical_params(spec);
  const std::vector<double> x0{0.5, -0.3, 0.4};
  const Tensor a = dp45_rollout(spec, x0, p, 0.05, 100, 25);
  const Tensor b = dp45_rollout(spec, x0, p, 0.05, 100, 50);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_LT(std::abs(a(100, c) - b(100, c)), 1e-6);
}

TEST(Integrator, RolloutDetectsDivergence) {
  const auto& spec = system_by_name("lorenz");
  const std::vector<double> x0{1e3, 1e3, 1e3};
  EXPECT_THROW(dp45_rollout(spec, x0, canonical_params(spec), 0.05, 100, 1), BoundExceeded);
}

TEST(Integrator, RolloutShapeAndSubsteps) {
  const auto& spec = system_by_name("lorenz");
  const std::vector<double> x0{1.0, 1.0, 1.0};
  const Tensor a = dp45_rollout(spec, x0, canonical_params(spec), 0.05, 20, 10);
  EXPECT_EQ(a.shape(), (Shape{21, 3}));
  EXPECT_EQ(a(0, 0), 1.0);
  // Ten substeps of 0.005 against a single 0.05 step differ, but only slightly.
  const Tensor b = dp45_rollout(spec, x0, canonical_params(spec), 0.05, 20, 1);
  EXPECT_NE(a(20, 0), b(20, 0));
  EXPECT_NEAR(a(1, 0), b(1, 0), 1e-3);
}

TEST(Integrator, NonFiniteStageRaises) {
  auto rhs = [](const std::vector<double>& y) { return std::vector<double>{std::log(y[0] - 1.0)}; };
  EXPECT_THROW(dp45_step_with(rhs, std::vector<double>{0.5}, 0.1), NumericError);
}
