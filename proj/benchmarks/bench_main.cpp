#include <benchmark/benchmark.h>

#include <cmath>

#include "pidm/denoiser.hpp"
#include "pidm/guidance.hpp"
#include "pidm/integrator.hpp"
#include "pidm/lyapunov.hpp"

using namespace pidm;

namespace {

void BM_Dp45Step(benchmark::State& state) {
  const auto& spec = system_by_name("lorenz96");
  const auto p = canonical_params(spec);
  Rng rng(1);
  Tensor x = Tensor::vector(sample_initial_state(spec, p, rng));
  for (auto _ : state) {
    x = dp45_step(spec, x, p, 0.005);
    benchmark::DoNotOptimize(x.data().data());
  }
}
BENCHMARK(BM_Dp45Step);

void BM_Conv1d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const Tensor x = randn(Shape{1, c, 128}, rng), w = randn(Shape{c, c, 3}, rng), b = randn(Shape{c}, rng);
  for (auto _ : state) {
    Tape tape;
    const Var y = conv1d(tape.constant(x), tape.constant(w), tape.constant(b));
    benchmark::DoNotOptimize(y.value().data().data());
  }
}
BENCHMARK(BM_Conv1d)->Arg(16)->Arg(64);

void BM_DenoiserForward(benchmark::State& state) {
  const Denoiser net(DenoiserConfig::desk(6, 128), 1);
  Rng rng(3);
  const Tensor x = randn(Shape{6, 128}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(net.predict(x, 100).data().data());
}
BENCHMARK(BM_DenoiserForward)->Unit(benchmark::kMillisecond);

void BM_DenoiserVjp(benchmark::State& state) {
  const Denoiser net(DenoiserConfig::desk(6, 128), 1);
  Rng rng(3);
  const Tensor x = randn(Shape{6, 128}, rng);
  for (auto _ : state) {
    Tape tape;
    const Var X = tape.leaf(x);
    tape.backward(sum(net.predict_on(tape, X, 100)));
    benchmark::DoNotOptimize(tape.grad(X).data().data());
  }
}
BENCHMARK(BM_DenoiserVjp)->Unit(benchmark::kMillisecond);

void BM_Rosenstein(benchmark::State& state) {
  const auto& spec = system_by_name("lorenz");
  const auto p = canonical_params(spec);
  const Tensor traj = dp45_rollout(spec, std::vector<double>{1.0, 1.0, 20.0}, p, 0.05,
                                   static_cast<std::size_t>(state.range(0)), 10);
  for (auto _ : state) {
    benchmark::DoNotOptimize(rosenstein_mle(traj, 0.05, EmbeddingConfig::from(spec.lyapunov)).lambda_max);
  }
}
BENCHMARK(BM_Rosenstein)->Arg(1000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
