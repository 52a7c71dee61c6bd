#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pidm/config.hpp"
#include "pidm/dataset.hpp"
#include "pidm/enkf.hpp"
#include "pidm/guidance.hpp"
#include "pidm/metrics.hpp"
#include "pidm/training.hpp"

namespace pidm {

using ProgressLog = std::function<void(const std::string&)>;

/// Ground truth and observations of one evaluation trial.
struct TrialData {
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  ParamVector params;
  Tensor truth;  // [C, L] normalized joint sequence
  ObservationSet obs;
};

/// Substream-seeded trial: fresh parameters for the configured condition, a
/// ground-truth rollout and sparse observations, all normalized with `stats`.
TrialData make_trial(const ExperimentConfig& cfg, const NormStats& stats, std::size_t trial);

struct TrialRecord {
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  std::string method;
  double lambda = 0.0;
  double rmse = kSanitizedValue;
  std::vector<double> mape;
  std::vector<double> p_hat;
  std::optional<double> lyapunov;
  std::size_t fallbacks = 0;
  std::string error;  // empty on success
};

struct MethodSummary {
  double rmse_mean = 0.0;
  double rmse_std = 0.0;
  std::vector<double> mape_mean;
  std::optional<double> lyapunov_mean;
  std::size_t trials = 0;
};

struct PairTest {
  std::string a, b;
  std::optional<WilcoxonResult> result;  // empty when every difference is zero
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<TrialRecord> rows;  // ordered by (trial, method)
  std::map<std::string, MethodSummary> summary;
  std::vector<PairTest> tests;
  double runtime_seconds = 0.0;
  std::size_t aborted = 0;
};

/// Reconstructions of an observation batch by one method.
struct Reconstruction {
  std::string system;
  std::string method;  // pidm | pure_ai | enkf
  double dt = 0.05;
  double lambda_base = 0.0;
  NormStats stats;
  Tensor states;  // [N, L, D_s] physical units
  Tensor p_hat;   // [N, D_p] physical units
  Tensor x0;      // [N, C, L] normalized; empty for enkf
};

void save_reconstruction(const std::filesystem::path& path, const Reconstruction& r);
Reconstruction load_reconstruction(const std::filesystem::path& path);

/// Corpus generation plus training at the configured preset.
Model train_for(const ExperimentConfig& cfg, const ProgressLog& log = {});

/// Loads cfg.model if it exists, otherwise trains and saves into cfg.out_dir.
Model obtain_model(const ExperimentConfig& cfg, const ProgressLog& log = {});

/// Runs every configured method on n_trials paired trials. Module errors inside
/// a trial are recorded as a 999-RMSE row with the error message.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const Model& model,
                                const ProgressLog& log = {});

struct AblationResult {
  std::vector<double> lambdas;
  std::vector<ExperimentResult> runs;  // one per lambda, PIDM only
};

/// One PIDM run per lambda value with trial seeds shared across the sweep.
AblationResult ablation_sweep(const ExperimentConfig& cfg, const Model& model,
                              const ProgressLog& log = {});

/// Per-trial rows, one per (trial, method), with 17 significant digits.
std::string to_csv(const ExperimentResult& r);
/// Means, stds, MAPE, Wilcoxon p-values and runtime.
std::string to_json(const ExperimentResult& r);

/// Writes <stem>.csv, <stem>.json and rmse_<method>.txt plot data into `dir`.
void write_outputs(const ExperimentResult& r, const std::filesystem::path& dir,
                   const std::string& stem = "experiment");
/// Writes ablation.csv, ablation.json and ablation.txt (lambda, mean RMSE).
void write_ablation(const AblationResult& r, const std::filesystem::path& dir);

}  // namespace pidm
