#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pidm/systems.hpp"

namespace pidm {

/// Scale settings shared by data generation, training and evaluation.
struct Preset {
  std::string name;
  std::size_t length;         // L
  std::size_t n_traj;         // training corpus size
  std::size_t transient;      // discarded integration steps
  std::size_t diffusion_steps;
  std::size_t base_channels;
  std::size_t time_embed_dim;
  bool use_attention;
  std::size_t batch;
  std::size_t train_steps;
  double lr;
  std::size_t n_trials;
};

/// "desk" (L=128, T=200, small U-Net) or "full" (L=1000, T=1000, full width).
const Preset& preset_by_name(std::string_view name);

/// Experiment description read from a key=value file.
///
///   # comment
///   system = lorenz            lorenz | rossler | hyper5d | lorenz96 | rabinovich
///   condition = ID             ID | OOD
///   preset = desk              desk | full
///   n_trials = 5               0 takes the preset value
///   methods = pidm,pure_ai,enkf
///   seed = 42
///   lambda_base = 2.0          optional; defaults to the system value
///   lambda_sweep = 0,0.5,1,2,5 used by `ablate`
///   density = 0.1              observed fraction of time steps
///   obs_sigma = 0.05           observation noise, normalized units
///   model = model.pidmw        trained on the fly (and saved to out_dir) when absent
///   out_dir = results
///   threads = 1                trials evaluated in parallel
///   lyapunov = false           also estimate lambda_max of each reconstruction
///   train_steps = 0            0 takes the preset value
struct ExperimentConfig {
  std::string system = "lorenz";
  Condition condition = Condition::ID;
  std::string preset = "desk";
  std::size_t n_trials = 0;
  std::vector<std::string> methods{"pidm", "pure_ai", "enkf"};
  std::uint64_t seed = 42;
  std::optional<double> lambda_base;
  std::vector<double> lambda_sweep{0.0, 0.5, 1.0, 2.0, 5.0};
  double density = 0.10;
  double obs_sigma = 0.05;
  std::filesystem::path model;
  std::filesystem::path out_dir = "results";
  std::size_t threads = 1;
  bool lyapunov = false;
  std::size_t train_steps = 0;

  const SystemSpec& spec() const { return system_by_name(system); }
  const Preset& preset_values() const { return preset_by_name(preset); }
  std::size_t trials() const { return n_trials ? n_trials : preset_values().n_trials; }
  double lambda() const { return lambda_base.value_or(spec().lambda_base); }

  /// Throws std::invalid_argument naming the offending key or line.
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  /// Applies one key=value assignment.
  void set(const std::string& key, const std::string& value);
  void validate() const;
  std::string to_text() const;
};

std::vector<double> parse_real_list(const std::string& s);

}  // namespace pidm
