#include "pidm/experiment.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "pidm/lyapunov.hpp"

namespace pidm {
namespace {

constexpr double kDt = 0.05;
constexpr std::uint64_t kCorpusStream = 0x636f72707573ULL;
constexpr std::uint64_t kModelStream = 0x6d6f64656cULL;
constexpr std::uint64_t kTrainStream = 0x747261696eULL;

enum Stream : std::uint64_t { kTruth = 0, kObs = 1, kSampler = 2, kFilter = 3 };

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

// Rows [0, D_s) of a normalized joint sequence, in physical units, as [L, D_s].
Tensor physical_states(const Tensor& joint, const NormStats& stats, std::size_t ds) {
  const Tensor phys = denormalize(joint, stats);
  const std::size_t len = phys.dim(1);
  Tensor out(Shape{len, ds});
  for (std::size_t l = 0; l < len; ++l)
    for (std::size_t c = 0; c < ds; ++c) out(l, c) = phys(c, l);
  return out;
}

Tensor physical_params(const Tensor& joint, const NormStats& stats, std::size_t ds) {
  const Tensor phys = denormalize(joint, stats);
  const std::size_t nc = phys.dim(0), len = phys.dim(1);
  Tensor out(Shape{nc - ds, len});
  for (std::size_t c = ds; c < nc; ++c)
    for (std::size_t l = 0; l < len; ++l) out(c - ds, l) = phys(c, l);
  return out;
}

std::optional<double> try_lyapunov(const ExperimentConfig& cfg, const Tensor& states) {
  if (!cfg.lyapunov) return std::nullopt;
  try {
    const double v = rosenstein_mle(states, kDt, EmbeddingConfig::from(cfg.spec().lyapunov)).lambda_max;
    if (std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  return std::nullopt;
}

std::vector<TrialRecord> run_trial(const ExperimentConfig& cfg, const Model& model, std::size_t trial) {
  const SystemSpec& spec = cfg.spec();
  const std::size_t ds = spec.state_dim;
  const double lambda = cfg.lambda();
  std::vector<TrialRecord> rows;
  TrialData data;
  std::string setup_error;
  try {
    data = make_trial(cfg, model.stats, trial);
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  const std::uint64_t seed = substream_seed(cfg.seed, trial);

  for (const auto& method : cfg.methods) {
    TrialRecord rec;
    rec.trial = trial;
    rec.seed = seed;
    rec.method = method;
    rec.lambda = method == "pidm" ? lambda : 0.0;
    if (!setup_error.empty()) {
      rec.error = setup_error;
      rows.push_back(std::move(rec));
      continue;
    }
    try {
      const Tensor truth = physical_states(data.truth, model.stats, ds);
      if (method == "enkf") {
        Rng rng = make_rng(seed, kFilter);
        const auto res = run_filter(spec, data.obs, model.stats, data.params, model.dt,
                                    enkf_defaults(spec), rng);
        rec.rmse = rmse(res.mean, truth);
        rec.p_hat = res.param_mean;
        rec.lyapunov = try_lyapunov(cfg, res.mean);
      } else {
        GuidanceProblem prob;
        prob.spec = &spec;
        prob.stats = &model.stats;
        prob.obs = &data.obs;
        prob.schedule = &model.schedule;
        prob.dt = model.dt;
        prob.eps_on_tape = [&](Tape& tape, const Var& x, std::size_t t) { return model.net.predict_on(tape, x, t); };
        prob.cfg.lambda_base = rec.lambda;
        Rng rng = make_rng(seed, kSampler);
        const auto out = sample([&](const Tensor& x, std::size_t t) { return model.net.predict(x, t); },
                                prob, rng);
        const Tensor recon = physical_states(out.x0_hat, model.stats, ds);
        rec.rmse = rmse(recon, truth);
        rec.p_hat = windowed_median(physical_params(out.x0_hat, model.stats, ds));
        rec.fallbacks = out.fallback_count;
        rec.lyapunov = try_lyapunov(cfg, recon);
      }
      rec.mape = mape(rec.p_hat, data.params.values);
    } catch (const std::exception& e) {
      rec.rmse = kSanitizedValue;
      rec.error = e.what();
    }
    rows.push_back(std::move(rec));
  }
  return rows;
}

MethodSummary summarize(const std::vector<const TrialRecord*>& rows) {
  MethodSummary s;
  s.trials = rows.size();
  std::vector<double> r;
  std::vector<double> ly;
  for (const auto* row : rows) {
    r.push_back(row->rmse);
    if (row->lyapunov) ly.push_back(*row->lyapunov);
    if (s.mape_mean.size() < row->mape.size()) s.mape_mean.resize(row->mape.size(), 0.0);
  }
  s.rmse_mean = mean(r);
  s.rmse_std = stddev(r);
  for (std::size_t p = 0; p < s.mape_mean.size(); ++p) {
    std::vector<double> v;
    for (const auto* row : rows)
      if (p < row->mape.size()) v.push_back(row->mape[p]);
    s.mape_mean[p] = mean(v);
  }
  if (!ly.empty()) s.lyapunov_mean = mean(ly);
  return s;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

nlohmann::json summary_json(const MethodSummary& s) {
  nlohmann::json j;
  j["rmse_mean"] = s.rmse_mean;
  j["rmse_std"] = s.rmse_std;
  j["mape_mean"] = s.mape_mean;
  j["lyapunov_mean"] = s.lyapunov_mean ? nlohmann::json(*s.lyapunov_mean) : nlohmann::json(nullptr);
  j["trials"] = s.trials;
  return j;
}

}  // namespace

void save_reconstruction(const std::filesystem::path& path, const Reconstruction& r) {
  Archive a("reconstruction");
  a.set("system", r.system);
  a.set("method", r.method);
  a.set("dt", r.dt);
  a.set("lambda_base", r.lambda_base);
  put_stats(a, r.stats);
  a.set("states", r.states);
  a.set("p_hat", r.p_hat);
  if (r.x0.size() > 0) a.set("x0", r.x0);
  a.save(path);
}

Reconstruction load_reconstruction(const std::filesystem::path& path) {
  const Archive a = Archive::load(path, "reconstruction");
  Reconstruction r;
  r.system = a.get_string("system");
  r.method = a.get_string("method");
  r.dt = a.get_real("dt");
  r.lambda_base = a.get_real("lambda_base");
  r.stats = get_stats(a);
  r.states = a.get_tensor("states");
  r.p_hat = a.get_tensor("p_hat");
  if (a.has("x0")) r.x0 = a.get_tensor("x0");
  return r;
}

TrialData make_trial(const ExperimentConfig& cfg, const NormStats& stats, std::size_t trial) {
  const SystemSpec& spec = cfg.spec();
  const Preset& p = cfg.preset_values();
  TrialData d;
  d.trial = trial;
  d.seed = substream_seed(cfg.seed, trial);
  CorpusOptions opts;
  opts.n_traj = 1;
  opts.length = p.length;
  opts.transient = p.transient;
  opts.dt = kDt;
  opts.condition = cfg.condition;
  Rng truth_rng = make_rng(d.seed, kTruth);
  RawTrajectory raw = simulate_trajectory(spec, opts, truth_rng);
  d.truth = normalize(pack_joint(raw), stats);
  d.params = std::move(raw.params);
  Tensor states(Shape{spec.state_dim, p.length});
  std::copy_n(d.truth.data().begin(), states.size(), states.data().begin());
  Rng obs_rng = make_rng(d.seed, kObs);
  d.obs = make_observations(states, cfg.density, cfg.obs_sigma, obs_rng);
  return d;
}

Model train_for(const ExperimentConfig& cfg, const ProgressLog& log) {
  const SystemSpec& spec = cfg.spec();
  const Preset& p = cfg.preset_values();
  CorpusOptions opts;
  opts.n_traj = p.n_traj;
  opts.length = p.length;
  opts.transient = p.transient;
  opts.dt = kDt;
  opts.condition = Condition::ID;
  opts.seed = substream_seed(cfg.seed, kCorpusStream);
  if (log) log("generating " + std::to_string(p.n_traj) + " " + spec.name + " training trajectories");
  const TrajectorySet corpus = generate_corpus(spec, opts);
  DenoiserConfig dc = DenoiserConfig::desk(spec.channels(), p.length);
  dc.base_channels = p.base_channels;
  dc.time_embed_dim = p.time_embed_dim;
  dc.use_attention = p.use_attention;
  Model model{spec.name, kDt, NoiseSchedule::scaled_linear(p.diffusion_steps), corpus.stats,
              Denoiser(dc, substream_seed(cfg.seed, kModelStream))};
  TrainConfig tc;
  tc.steps = cfg.train_steps ? cfg.train_steps : p.train_steps;
  tc.batch = p.batch;
  tc.adam.lr = p.lr;
  tc.seed = substream_seed(cfg.seed, kTrainStream);
  train(model, corpus, tc, [&](std::size_t step, double loss, double lr) {
    if (log) log("step " + std::to_string(step) + " loss " + fmt(loss) + " lr " + fmt(lr));
  });
  return model;
}

Model obtain_model(const ExperimentConfig& cfg, const ProgressLog& log) {
  if (!cfg.model.empty() && std::filesystem::exists(cfg.model)) {
    Model m = load_model(cfg.model);
    if (m.system != cfg.system) {
      throw std::invalid_argument("model " + cfg.model.string() + " was trained on " + m.system +
                                  ", not " + cfg.system);
    }
    return m;
  }
  Model m = train_for(cfg, log);
  const auto path = cfg.model.empty() ? cfg.out_dir / ("model_" + cfg.system + ".pidmw") : cfg.model;
  save_model(path, m);
  if (log) log("saved model to " + path.string());
  return m;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const Model& model, const ProgressLog& log) {
  cfg.validate();
  if (model.system != cfg.system) {
    throw std::invalid_argument("model was trained on " + model.system + ", experiment is on " + cfg.system);
  }
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = cfg.trials();
  std::vector<std::vector<TrialRecord>> per_trial(n);
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&]() {
    for (std::size_t i = next++; i < n; i = next++) {
      per_trial[i] = run_trial(cfg, model, i);
      if (log) {
        std::lock_guard<std::mutex> lock(log_mutex);
        std::ostringstream os;
        os << "trial " << i;
        for (const auto& r : per_trial[i]) os << "  " << r.method << " rmse " << fmt(r.rmse);
        log(os.str());
      }
    }
  };
  const std::size_t n_threads = std::min(cfg.threads, n);
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  ExperimentResult res;
  res.config = cfg;
  for (auto& rows : per_trial)
    for (auto& r : rows) {
      if (!r.error.empty()) ++res.aborted;
      res.rows.push_back(std::move(r));
    }
  for (const auto& m : cfg.methods) {
    std::vector<const TrialRecord*> rows;
    for (const auto& r : res.rows)
      if (r.method == m) rows.push_back(&r);
    res.summary[m] = summarize(rows);
  }
  for (std::size_t i = 0; i < cfg.methods.size(); ++i) {
    for (std::size_t j = i + 1; j < cfg.methods.size(); ++j) {
      PairTest pt{cfg.methods[i], cfg.methods[j], std::nullopt};
      std::vector<double> a, b;
      for (const auto& r : res.rows) {
        if (r.method == pt.a) a.push_back(r.rmse);
        if (r.method == pt.b) b.push_back(r.rmse);
      }
      try {
        pt.result = wilcoxon_signed_rank(a, b);
      } catch (const std::invalid_argument&) {
      }
      res.tests.push_back(std::move(pt));
    }
  }
  res.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

AblationResult ablation_sweep(const ExperimentConfig& cfg, const Model& model, const ProgressLog& log) {
  if (cfg.lambda_sweep.empty()) throw std::invalid_argument("ablation_sweep: lambda_sweep is empty");
  AblationResult out;
  for (double lambda : cfg.lambda_sweep) {
    ExperimentConfig c = cfg;
    c.methods = {"pidm"};
    c.lambda_base = lambda;
    if (log) log("lambda_base = " + fmt(lambda));
    out.lambdas.push_back(lambda);
    out.runs.push_back(run_experiment(c, model, log));
  }
  return out;
}

std::string to_csv(const ExperimentResult& r) {
  const SystemSpec& spec = r.config.spec();
  std::ostringstream os;
  os << "trial,seed,method,lambda,rmse";
  for (const auto& name : spec.param_names) os << ",mape_" << name;
  for (const auto& name : spec.param_names) os << ",p_hat_" << name;
  os << ",lyapunov,fallbacks,error\n";
  for (const auto& row : r.rows) {
    os << row.trial << ',' << row.seed << ',' << row.method << ',' << fmt(row.lambda) << ','
       << fmt(row.rmse);
    for (std::size_t p = 0; p < spec.param_dim; ++p) os << ',' << (p < row.mape.size() ? fmt(row.mape[p]) : "");
    for (std::size_t p = 0; p < spec.param_dim; ++p) os << ',' << (p < row.p_hat.size() ? fmt(row.p_hat[p]) : "");
    os << ',' << (row.lyapunov ? fmt(*row.lyapunov) : "") << ',' << row.fallbacks << ','
       << csv_field(row.error) << '\n';
  }
  return os.str();
}

std::string to_json(const ExperimentResult& r) {
  nlohmann::json j;
  j["system"] = r.config.system;
  j["condition"] = std::string(to_string(r.config.condition));
  j["preset"] = r.config.preset;
  j["n_trials"] = r.config.trials();
  j["seed"] = r.config.seed;
  j["lambda_base"] = r.config.lambda();
  j["param_names"] = r.config.spec().param_names;
  for (const auto& [name, s] : r.summary) j["methods"][name] = summary_json(s);
  j["wilcoxon"] = nlohmann::json::array();
  for (const auto& t : r.tests) {
    nlohmann::json e{{"a", t.a}, {"b", t.b}};
    if (t.result) {
      e["statistic"] = t.result->statistic;
      e["p_value"] = t.result->p_value;
      e["n"] = t.result->n;
      e["exact"] = t.result->exact;
    } else {
      e["statistic"] = nullptr;
      e["p_value"] = nullptr;
      e["note"] = "all paired differences are zero";
    }
    j["wilcoxon"].push_back(e);
  }
  j["aborted_trials"] = r.aborted;
  j["runtime_seconds"] = r.runtime_seconds;
  return j.dump(2) + "\n";
}

void write_outputs(const ExperimentResult& r, const std::filesystem::path& dir, const std::string& stem) {
  write_file_atomic(dir / (stem + ".csv"), to_csv(r));
  write_file_atomic(dir / (stem + ".json"), to_json(r));
  for (const auto& m : r.config.methods) {
    std::ostringstream os;
    os << "# trial rmse\n";
    for (const auto& row : r.rows)
      if (row.method == m) os << row.trial << ' ' << fmt(row.rmse) << '\n';
    write_file_atomic(dir / ("rmse_" + m + ".txt"), os.str());
  }
}

void write_ablation(const AblationResult& r, const std::filesystem::path& dir) {
  std::ostringstream csv, txt;
  csv << "lambda,trial,seed,rmse,fallbacks,error\n";
  txt << "# lambda mean_rmse\n";
  nlohmann::json j = nlohmann::json::array();
  for (std::size_t i = 0; i < r.lambdas.size(); ++i) {
    const auto& run = r.runs[i];
    for (const auto& row : run.rows) {
      csv << fmt(r.lambdas[i]) << ',' << row.trial << ',' << row.seed << ',' << fmt(row.rmse) << ','
          << row.fallbacks << ',' << csv_field(row.error) << '\n';
    }
    const auto& s = run.summary.at("pidm");
    txt << fmt(r.lambdas[i]) << ' ' << fmt(s.rmse_mean) << '\n';
    j.push_back({{"lambda", r.lambdas[i]}, {"rmse_mean", s.rmse_mean}, {"rmse_std", s.rmse_std},
                 {"aborted_trials", run.aborted}});
  }
  write_file_atomic(dir / "ablation.csv", csv.str());
  write_file_atomic(dir / "ablation.json", j.dump(2) + "\n");
  write_file_atomic(dir / "ablation.txt", txt.str());
}

}  // namespace pidm
