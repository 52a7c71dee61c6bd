#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pidm/integrator.hpp"
#include "pidm/store.hpp"
#include "pidm/systems.hpp"

namespace pidm {

/// Per-channel min/max of the training split.
/// Maps z to 2 (z - min) / (max - min + eps) - 1.
struct NormStats {
  std::vector<double> z_min;
  std::vector<double> z_max;
  double eps = 1e-8;

  std::size_t channels() const noexcept { return z_min.size(); }
  double scale(std::size_t c) const { return z_max[c] - z_min[c] + eps; }
};

/// Stats over a raw corpus [N, C, L].
NormStats compute_stats(const Tensor& raw);

/// Channel axis is rank - 2: accepts [C, L] or [N, C, L].
Tensor normalize(const Tensor& raw, const NormStats& stats);
Tensor denormalize(const Tensor& z, const NormStats& stats);
Var denormalize(const Var& z, const NormStats& stats);

struct CorpusMeta {
  std::string system;
  Condition condition = Condition::ID;
  std::size_t substeps = 1;
  std::uint64_t seed = 0;
  std::size_t transient = 0;
  std::string note;
};

/// Normalized joint state-parameter sequences.
struct TrajectorySet {
  Tensor Z;       // [N, D_s + D_p, L], normalized
  Tensor params;  // [N, D_p], physical units
  double dt = 0.05;
  CorpusMeta meta;
  NormStats stats;

  std::size_t size() const { return Z.dim(0); }
  std::size_t channels() const { return Z.dim(1); }
  std::size_t length() const { return Z.dim(2); }
  /// Normalized joint sequence of trajectory i, [C, L].
  Tensor trajectory(std::size_t i) const;
};

struct CorpusOptions {
  std::size_t n_traj = 64;
  std::size_t length = 128;
  std::size_t transient = 700;
  double dt = 0.05;
  Condition condition = Condition::ID;
  std::uint64_t seed = 42;
  /// 0 selects the system's ground-truth substep count.
  std::size_t substeps = 0;
  std::size_t max_rejections = 100;
};

/// One ground-truth trajectory after transient discard.
struct RawTrajectory {
  ParamVector params;
  Tensor states;  // [L, D_s], physical units
  std::size_t rejections = 0;
};

/// Draws params and an initial state, integrates transient + length steps and
/// keeps the last `length`. Rollouts that leave the amplitude bound are redrawn.
/// Throws std::runtime_error after more than max_rejections consecutive failures.
RawTrajectory simulate_trajectory(const SystemSpec& spec, const CorpusOptions& opts, Rng& rng);

/// Joint raw sequence [D_s + D_p, L] with parameters broadcast along time.
Tensor pack_joint(const RawTrajectory& traj);

/// Corpus normalized with its own statistics (a training split).
TrajectorySet generate_corpus(const SystemSpec& spec, const CorpusOptions& opts);
/// Corpus normalized with externally supplied statistics (validation/test splits).
TrajectorySet generate_corpus(const SystemSpec& spec, const CorpusOptions& opts,
                              const NormStats& stats);

/// Sparse noisy observations of one normalized trajectory.
struct ObservationSet {
  std::vector<std::uint8_t> mask;  // [L]
  Tensor y;                        // [D_s, L], zero where unobserved
  double noise_sigma = 0.05;
  double density = 0.10;

  std::size_t length() const noexcept { return mask.size(); }
  std::size_t count() const;
  std::vector<std::size_t> indices() const;
};

/// `states` [D_s, L] in normalized units; round(density * L) indices (at least one)
/// are drawn uniformly without replacement and corrupted by N(0, sigma^2).
ObservationSet make_observations(const Tensor& states, double density, double sigma, Rng& rng);

/// Observations for several trajectories plus the truth they were drawn from.
struct ObservationBatch {
  std::string system;
  double dt = 0.05;
  NormStats stats;
  std::vector<ObservationSet> obs;
  Tensor truth;   // [N, C, L] normalized
  Tensor params;  // [N, D_p] physical
};

/// Ground-truth solver note recorded in corpus metadata.
std::string solver_deviation_note(const SystemSpec& spec, std::size_t substeps);

Archive to_archive(const TrajectorySet& set);
TrajectorySet corpus_from_archive(const Archive& a);
void save_corpus(const std::filesystem::path& path, const TrajectorySet& set);
TrajectorySet load_corpus(const std::filesystem::path& path);

Archive to_archive(const ObservationBatch& batch);
ObservationBatch observations_from_archive(const Archive& a);
void save_observations(const std::filesystem::path& path, const ObservationBatch& batch);
ObservationBatch load_observations(const std::filesystem::path& path);

void put_stats(Archive& a, const NormStats& stats);
NormStats get_stats(const Archive& a);

}  // namespace pidm
