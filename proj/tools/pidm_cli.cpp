// pidm: data generation, training, guided sampling, filtering and evaluation.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "pidm/config.hpp"
#include "pidm/dataset.hpp"
#include "pidm/enkf.hpp"
#include "pidm/experiment.hpp"
#include "pidm/guidance.hpp"
#include "pidm/integrator.hpp"
#include "pidm/lyapunov.hpp"
#include "pidm/rng.hpp"
#include "pidm/training.hpp"

namespace fs = std::filesystem;
using namespace pidm;

namespace {

fs::path data_root() {
  const char* env = std::getenv("PIDM_DATA_DIR");
  return env && *env ? fs::path(env) : fs::path(".");
}

// Relative output paths land under PIDM_DATA_DIR when it is set.
fs::path output_path(const std::string& given, const std::string& fallback) {
  const fs::path p = given.empty() ? fs::path(fallback) : fs::path(given);
  const fs::path out = p.is_absolute() ? p : data_root() / p;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  return out;
}

void log_line(const std::string& s) { std::cerr << s << "\n"; }

Tensor slice0(const Tensor& t, std::size_t i) {
  Shape rest(t.shape().begin() + 1, t.shape().end());
  Tensor out(rest);
  std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(i * out.size()), out.size(), out.data().begin());
  return out;
}

void put0(Tensor& t, std::size_t i, const Tensor& v) {
  std::copy(v.data().begin(), v.data().end(), t.data().begin() + static_cast<std::ptrdiff_t>(i * v.size()));
}

// Physical states [L, D_s] of a normalized joint sequence [C, L].
Tensor joint_states(const Tensor& joint, const NormStats& stats, std::size_t ds) {
  const Tensor phys = denormalize(joint, stats);
  const std::size_t len = phys.dim(1);
  Tensor out(Shape{len, ds});
  for (std::size_t l = 0; l < len; ++l)
    for (std::size_t c = 0; c < ds; ++c) out(l, c) = phys(c, l);
  return out;
}

int cmd_generate(const std::string& system, const std::string& condition, std::size_t n, std::size_t len,
                 std::size_t transient, std::uint64_t seed, const std::string& stats_from,
                 const std::string& out) {
  const SystemSpec& spec = system_by_name(system);
  CorpusOptions opts;
  opts.n_traj = n;
  opts.length = len;
  opts.transient = transient;
  opts.condition = parse_condition(condition);
  opts.seed = seed;
  const TrajectorySet set = stats_from.empty()
                                ? generate_corpus(spec, opts)
                                : generate_corpus(spec, opts, load_corpus(stats_from).stats);
  const fs::path path = output_path(out, "corpus_" + system + ".pidm");
  save_corpus(path, set);
  std::cout << "wrote " << set.size() << " " << system << " trajectories of length " << set.length()
            << " to " << path.string() << "\n";
  if (!set.meta.note.empty()) std::cout << "note: " << set.meta.note << "\n";
  return 0;
}

int cmd_observe(const std::string& corpus_path, double density, double sigma, std::uint64_t seed,
                const std::string& out) {
  const TrajectorySet set = load_corpus(corpus_path);
  const SystemSpec& spec = system_by_name(set.meta.system);
  ObservationBatch batch;
  batch.system = set.meta.system;
  batch.dt = set.dt;
  batch.stats = set.stats;
  batch.truth = set.Z;
  batch.params = set.params;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Tensor joint = set.trajectory(i);
    Tensor states(Shape{spec.state_dim, set.length()});
    std::copy_n(joint.data().begin(), states.size(), states.data().begin());
    Rng rng = make_rng(seed, i);
    batch.obs.push_back(make_observations(states, density, sigma, rng));
  }
  const fs::path path = output_path(out, "obs_" + batch.system + ".pidm");
  save_observations(path, batch);
  std::cout << "wrote observations of " << batch.obs.size() << " trajectories (" << batch.obs.front().count()
            << " observed steps each) to " << path.string() << "\n";
  return 0;
}

int cmd_train(const std::string& corpus_path, const std::string& preset_name, std::size_t steps,
              std::uint64_t seed, const std::string& out) {
  const TrajectorySet corpus = load_corpus(corpus_path);
  const Preset& p = preset_by_name(preset_name);
  const SystemSpec& spec = system_by_name(corpus.meta.system);
  DenoiserConfig dc = preset_name == "full" ? DenoiserConfig::full(spec.channels(), corpus.length())
                                             : DenoiserConfig::desk(spec.channels(), corpus.length());
  Model model{spec.name, corpus.dt, NoiseSchedule::scaled_linear(p.diffusion_steps), corpus.stats,
              Denoiser(dc, substream_seed(seed, 1))};
  TrainConfig tc;
  tc.steps = steps ? steps : p.train_steps;
  tc.batch = p.batch;
  tc.adam.lr = p.lr;
  tc.seed = seed;
  std::cerr << spec.name << ": " << model.net.parameter_count() << " parameters, " << tc.steps << " steps\n";
  const auto res = train(model, corpus, tc, [](std::size_t step, double loss, double lr) {
    std::fprintf(stderr, "step %zu  loss %.6f  lr %.3g\n", step, loss, lr);
  });
  const fs::path path = output_path(out, "model_" + spec.name + ".pidmw");
  save_model(path, model);
  std::cout << "final loss " << res.loss.back() << ", model written to " << path.string() << "\n";
  return 0;
}

nlohmann::json trace_json(const SampleOutcome& o) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& e : o.trace) {
    steps.push_back({{"t", e.t},
                     {"lambda", e.lambda},
                     {"guided", e.guided},
                     {"fallback", e.fallback},
                     {"l_data", e.l_data},
                     {"l_phy", e.l_phy},
                     {"g_norm", e.g_norm},
                     {"correction_norm", e.correction_norm}});
  }
  return {{"fallback_count", o.fallback_count}, {"guided_steps", o.guided_steps}, {"guidance_trace", steps}};
}

int cmd_sample(const std::string& model_path, const std::string& obs_path, std::optional<double> lambda_base,
               std::uint64_t seed, const std::string& out, const std::string& trace) {
  const Model model = load_model(model_path);
  const ObservationBatch batch = load_observations(obs_path);
  if (batch.system != model.system) {
    throw std::invalid_argument("observations are of " + batch.system + " but the model was trained on " +
                                model.system);
  }
  const SystemSpec& spec = system_by_name(model.system);
  const std::size_t n = batch.obs.size(), len = batch.obs.front().length(), c = spec.channels();
  Reconstruction rec;
  rec.system = model.system;
  rec.dt = model.dt;
  rec.lambda_base = lambda_base.value_or(spec.lambda_base);
  rec.method = rec.lambda_base > 0.0 ? "pidm" : "pure_ai";
  rec.stats = model.stats;
  rec.states = Tensor(Shape{n, len, spec.state_dim});
  rec.p_hat = Tensor(Shape{n, spec.param_dim});
  rec.x0 = Tensor(Shape{n, c, len});
  nlohmann::json traces = nlohmann::json::array();
  std::size_t fallbacks = 0;
  for (std::size_t i = 0; i < n; ++i) {
    GuidanceProblem prob;
    prob.spec = &spec;
    prob.stats = &model.stats;
    prob.obs = &batch.obs[i];
    prob.schedule = &model.schedule;
    prob.dt = model.dt;
    prob.eps_on_tape = [&](Tape& tape, const Var& x, std::size_t t) { return model.net.predict_on(tape, x, t); };
    prob.cfg.lambda_base = rec.lambda_base;
    Rng rng = make_rng(seed, i);
    const auto o = sample([&](const Tensor& x, std::size_t t) { return model.net.predict(x, t); }, prob, rng);
    put0(rec.x0, i, o.x0_hat);
    put0(rec.states, i, joint_states(o.x0_hat, model.stats, spec.state_dim));
    for (std::size_t p = 0; p < spec.param_dim; ++p) rec.p_hat(i, p) = o.p_hat[p];
    fallbacks += o.fallback_count;
    auto tj = trace_json(o);
    tj["trajectory"] = i;
    traces.push_back(std::move(tj));
    std::cerr << "trajectory " << i << ": " << o.guided_steps << " guided steps, " << o.fallback_count
              << " fallbacks\n";
  }
  const fs::path path = output_path(out, "recon_" + model.system + ".pidm");
  save_reconstruction(path, rec);
  std::cout << "wrote " << n << " reconstructions (lambda_base " << rec.lambda_base << ", " << fallbacks
            << " fallbacks) to " << path.string() << "\n";
  if (!trace.empty()) {
    const nlohmann::json doc{{"system", model.system}, {"lambda_base", rec.lambda_base}, {"trajectories", traces}};
    write_file_atomic(output_path(trace, "trace.json"), doc.dump(2) + "\n");
  }
  return 0;
}

int cmd_enkf(const std::string& system, const std::string& obs_path, std::size_t members, std::uint64_t seed,
             bool augment, const std::string& out) {
  const ObservationBatch batch = load_observations(obs_path);
  const std::string name = system.empty() ? batch.system : system;
  if (name != batch.system) throw std::invalid_argument("observations are of " + batch.system + ", not " + name);
  const SystemSpec& spec = system_by_name(name);
  EnkfConfig cfg = enkf_defaults(spec);
  cfg.n_members = members;
  cfg.augment_params = augment;
  const std::size_t n = batch.obs.size(), len = batch.obs.front().length();
  Reconstruction rec;
  rec.system = name;
  rec.method = "enkf";
  rec.dt = batch.dt;
  rec.stats = batch.stats;
  rec.states = Tensor(Shape{n, len, spec.state_dim});
  rec.p_hat = Tensor(Shape{n, spec.param_dim});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> pv(spec.param_dim);
    for (std::size_t p = 0; p < spec.param_dim; ++p) pv[p] = batch.params(i, p);
    Rng rng = make_rng(seed, i);
    const auto r = run_filter(spec, batch.obs[i], batch.stats, make_params(spec, pv), batch.dt, cfg, rng);
    put0(rec.states, i, r.mean);
    for (std::size_t p = 0; p < spec.param_dim; ++p) rec.p_hat(i, p) = r.param_mean[p];
    const Tensor truth = joint_states(slice0(batch.truth, i), batch.stats, spec.state_dim);
    std::cerr << "trajectory " << i << ": rmse " << rmse(r.mean, truth) << ", max |x| " << r.max_abs_state
              << ", " << r.reinitialized << " members redrawn\n";
  }
  const fs::path path = output_path(out, "enkf_" + name + ".pidm");
  save_reconstruction(path, rec);
  std::cout << "wrote " << n << " EnKF reconstructions to " << path.string() << "\n";
  return 0;
}

// Physical state trajectories [N, L, D_s] from a reconstruction, corpus or observation archive.
Tensor load_trajectories(const fs::path& path, std::string& system) {
  const Archive a = Archive::load(path);
  if (a.kind() == "reconstruction") {
    const Reconstruction r = load_reconstruction(path);
    system = r.system;
    return r.states;
  }
  Tensor joint;
  NormStats stats;
  if (a.kind() == "corpus") {
    const TrajectorySet s = corpus_from_archive(a);
    system = s.meta.system;
    joint = s.Z;
    stats = s.stats;
  } else if (a.kind() == "observations") {
    const ObservationBatch b = observations_from_archive(a);
    system = b.system;
    joint = b.truth;
    stats = b.stats;
  } else {
    throw std::invalid_argument(path.string() + ": cannot take trajectories from a '" + a.kind() + "' archive");
  }
  const std::size_t ds = system_by_name(system).state_dim, n = joint.dim(0), len = joint.dim(2);
  Tensor out(Shape{n, len, ds});
  for (std::size_t i = 0; i < n; ++i) put0(out, i, joint_states(slice0(joint, i), stats, ds));
  return out;
}

int cmd_lyapunov(const std::string& traj, const std::string& system, double dt, int index,
                 const std::vector<std::size_t>& embed) {
  std::string stored;
  const Tensor all = load_trajectories(traj, stored);
  const std::string name = system.empty() ? stored : system;
  if (name != stored) throw std::invalid_argument(traj + " holds " + stored + " trajectories, not " + name);
  EmbeddingConfig cfg = EmbeddingConfig::from(system_by_name(name).lyapunov);
  if (embed.size() == 4) {
    cfg.m = embed[0];
    cfg.tau = embed[1];
    cfg.m_sep = embed[2];
    cfg.tlen = embed[3];
  }
  std::vector<double> values;
  for (std::size_t i = 0; i < all.dim(0); ++i) {
    if (index >= 0 && static_cast<std::size_t>(index) != i) continue;
    LyapunovEstimate e;
    try {
      e = rosenstein_mle(slice0(all, i), dt, cfg);
    } catch (const std::invalid_argument& err) {
      // The per-system settings assume long series; short ones need --embed.
      throw std::invalid_argument(std::string(err.what()) + " (series of " + std::to_string(all.dim(1)) +
                                  " steps; pass a smaller --embed m tau m_sep tlen)");
    }
    std::printf("trajectory %zu  lambda_max %.6f  r2 %.4f  windows", i, e.lambda_max, e.r2);
    for (double w : e.window_lambdas) std::printf(" %.6f", w);
    std::printf("\n");
    values.push_back(e.lambda_max);
  }
  if (values.size() > 1) std::printf("mean lambda_max %.6f over %zu trajectories\n", mean(values), values.size());
  return 0;
}

void print_summary(const ExperimentResult& r) {
  std::printf("%-8s %14s %14s\n", "method", "rmse_mean", "rmse_std");
  for (const auto& [m, s] : r.summary) {
    std::printf("%-8s %14.6f %14.6f  mape", m.c_str(), s.rmse_mean, s.rmse_std);
    for (double v : s.mape_mean) std::printf(" %.3f", v);
    std::printf("\n");
  }
  for (const auto& t : r.tests) {
    if (t.result) {
      std::printf("wilcoxon %s vs %s: W=%.1f p=%.6g (n=%zu, %s)\n", t.a.c_str(), t.b.c_str(), t.result->statistic,
                  t.result->p_value, t.result->n, t.result->exact ? "exact" : "normal");
    } else {
      std::printf("wilcoxon %s vs %s: all differences zero\n", t.a.c_str(), t.b.c_str());
    }
  }
}

ExperimentConfig load_config(const std::string& path, const std::string& out_dir, const std::string& model) {
  ExperimentConfig cfg = ExperimentConfig::load(path);
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  if (!cfg.out_dir.is_absolute()) cfg.out_dir = data_root() / cfg.out_dir;
  if (!model.empty()) cfg.model = model;
  fs::create_directories(cfg.out_dir);
  return cfg;
}

int cmd_evaluate(const std::string& config, const std::string& out_dir, const std::string& model_path) {
  const ExperimentConfig cfg = load_config(config, out_dir, model_path);
  const Model model = obtain_model(cfg, log_line);
  const ExperimentResult r = run_experiment(cfg, model, log_line);
  write_outputs(r, cfg.out_dir);
  print_summary(r);
  std::printf("results in %s (%.1f s)\n", cfg.out_dir.string().c_str(), r.runtime_seconds);
  if (r.aborted) {
    std::fprintf(stderr, "%zu trial(s) aborted\n", r.aborted);
    return 2;
  }
  return 0;
}

int cmd_ablate(const std::string& config, const std::string& lambdas, const std::string& out_dir,
               const std::string& model_path) {
  ExperimentConfig cfg = load_config(config, out_dir, model_path);
  if (!lambdas.empty()) cfg.lambda_sweep = parse_real_list(lambdas);
  cfg.validate();
  const Model model = obtain_model(cfg, log_line);
  const AblationResult r = ablation_sweep(cfg, model, log_line);
  write_ablation(r, cfg.out_dir);
  std::size_t aborted = 0;
  std::printf("%10s %14s %14s\n", "lambda", "rmse_mean", "rmse_std");
  for (std::size_t i = 0; i < r.lambdas.size(); ++i) {
    const auto& s = r.runs[i].summary.at("pidm");
    std::printf("%10.3f %14.6f %14.6f\n", r.lambdas[i], s.rmse_mean, s.rmse_std);
    aborted += r.runs[i].aborted;
  }
  if (aborted) {
    std::fprintf(stderr, "%zu trial(s) aborted\n", aborted);
    return 2;
  }
  return 0;
}

int cmd_validate_integrator() {
  const ButcherTableau& tab = dormand_prince_tableau();
  double row_sum = 0.0, weight_sum = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < i; ++j) s += tab.a[i][j];
    row_sum = std::max(row_sum, std::abs(s - tab.c[i]));
    weight_sum += tab.b[i];
  }
  std::printf("max |sum_j a_ij - c_i| = %.3e\n", row_sum);
  std::printf("|sum_i b_i - 1|        = %.3e\n", std::abs(weight_sum - 1.0));
  bool ok = row_sum < 1e-15 && std::abs(weight_sum - 1.0) < 1e-15;
  for (const SystemSpec& spec : all_systems()) {
    const ParamVector p = canonical_params(spec);
    Rng rng = make_rng(7, static_cast<std::uint64_t>(spec.kind));
    const auto x0 = sample_initial_state(spec, p, rng);
    const double order = convergence_order(spec, x0, p, 1.0);
    const bool gated = spec.kind == SystemKind::Lorenz || spec.kind == SystemKind::Rossler;
    std::printf("%-11s convergence order %.3f%s\n", spec.name.c_str(), order, gated ? "" : "  (informational)");
    if (gated) ok = ok && order >= 4.7;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Physics-guided diffusion reconstruction of chaotic systems"};
  app.require_subcommand(1);

  std::string system, condition = "ID", out, corpus, stats_from, preset = "desk", model, obs, trace, traj, config,
                      lambdas, out_dir;
  std::size_t n = 64, len = 128, transient = 700, steps = 0, members = 50;
  std::uint64_t seed = 42;
  double density = 0.10, sigma = 0.05, dt = 0.05, lambda_value = 0.0;
  int index = -1;
  std::vector<std::size_t> embed;
  bool augment = false;

  auto* gen = app.add_subcommand("generate", "Simulate a normalized trajectory corpus");
  gen->add_option("--system", system, "lorenz | rossler | hyper5d | lorenz96 | rabinovich")->required();
  gen->add_option("--condition", condition, "ID or OOD parameter draws")->capture_default_str();
  gen->add_option("--n", n, "Number of trajectories")->capture_default_str();
  gen->add_option("--len", len, "Steps kept per trajectory")->capture_default_str();
  gen->add_option("--transient", transient, "Discarded warm-up steps")->capture_default_str();
  gen->add_option("--seed", seed)->capture_default_str();
  gen->add_option("--stats-from", stats_from, "Normalize with the statistics of this corpus");
  gen->add_option("--out", out, "Output archive (default corpus_<system>.pidm)");

  auto* observe = app.add_subcommand("observe", "Draw sparse noisy observations of a corpus");
  observe->add_option("--corpus", corpus)->required();
  observe->add_option("--density", density, "Observed fraction of time steps")->capture_default_str();
  observe->add_option("--sigma", sigma, "Noise std in normalized units")->capture_default_str();
  observe->add_option("--seed", seed)->capture_default_str();
  observe->add_option("--out", out);

  auto* tr = app.add_subcommand("train", "Train the denoiser on a corpus");
  tr->add_option("--corpus", corpus)->required();
  tr->add_option("--preset", preset, "desk | full")->capture_default_str();
  tr->add_option("--steps", steps, "Optimizer steps (0 takes the preset value)")->capture_default_str();
  tr->add_option("--seed", seed)->capture_default_str();
  tr->add_option("--out", out);

  auto* smp = app.add_subcommand("sample", "Reconstruct observed trajectories");
  smp->add_option("--model", model)->required();
  smp->add_option("--obs", obs)->required();
  auto* lambda_opt = smp->add_option("--lambda-base", lambda_value, "Physics weight (default: per system)");
  smp->add_option("--seed", seed)->capture_default_str();
  smp->add_option("--out", out);
  smp->add_option("--trace", trace, "Write the per-step guidance trace as JSON");

  auto* ek = app.add_subcommand("enkf", "Ensemble Kalman filter baseline");
  ek->add_option("--system", system);
  ek->add_option("--obs", obs)->required();
  ek->add_option("--members", members)->capture_default_str();
  ek->add_option("--seed", seed)->capture_default_str();
  ek->add_flag("--augment-params", augment, "Estimate parameters jointly with the state");
  ek->add_option("--out", out);

  auto* ly = app.add_subcommand("lyapunov", "Largest Lyapunov exponent of stored trajectories");
  ly->add_option("--traj", traj, "Reconstruction, corpus or observation archive")->required();
  ly->add_option("--system", system);
  ly->add_option("--dt", dt)->capture_default_str();
  ly->add_option("--index", index, "Only this trajectory");
  ly->add_option("--embed", embed, "m tau m_sep tlen (default: per system)")->expected(4);

  auto* ev = app.add_subcommand("evaluate", "Paired trials of pidm, pure_ai and enkf");
  ev->add_option("--config", config)->required();
  ev->add_option("--out-dir", out_dir);
  ev->add_option("--model", model);

  auto* ab = app.add_subcommand("ablate", "Physics-weight sweep");
  ab->add_option("--config", config)->required();
  ab->add_option("--lambdas", lambdas, "Comma-separated lambda_base values");
  ab->add_option("--out-dir", out_dir);
  ab->add_option("--model", model);

  auto* vi = app.add_subcommand("validate-integrator", "Tableau residuals and convergence orders");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(system, condition, n, len, transient, seed, stats_from, out);
    if (observe->parsed()) return cmd_observe(corpus, density, sigma, seed, out);
    if (tr->parsed()) return cmd_train(corpus, preset, steps, seed, out);
    if (smp->parsed()) {
      const std::optional<double> lb = lambda_opt->count() ? std::optional<double>(lambda_value) : std::nullopt;
      return cmd_sample(model, obs, lb, seed, out, trace);
    }
    if (ek->parsed()) return cmd_enkf(system, obs, members, seed, augment, out);
    if (ly->parsed()) return cmd_lyapunov(traj, system, dt, index, embed);
    if (ev->parsed()) return cmd_evaluate(config, out_dir, model);
    if (ab->parsed()) return cmd_ablate(config, lambdas, out_dir, model);
    if (vi->parsed()) return cmd_validate_integrator();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
