#include "pidm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace pidm {
namespace {

void check_channels(std::string_view op, const Tensor& t, const NormStats& stats) {
  if (t.rank() < 2 || t.dim(t.rank() - 2) != stats.channels()) {
    throw ShapeError(op, t.shape(), Shape{stats.channels(), 0});
  }
}

// Per-element affine coefficients (a, b) of denormalization, x = a z + b.
std::pair<Tensor, Tensor> denorm_coefficients(const Shape& shape, const NormStats& stats) {
  Tensor a(shape), b(shape);
  const std::size_t len = shape.back();
  const std::size_t nc = stats.channels();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const std::size_t c = (i / len) % nc;
    const double half = 0.5 * stats.scale(c);
    a[i] = half;
    b[i] = half + stats.z_min[c];
  }
  return {std::move(a), std::move(b)};
}

Tensor stats_tensor(const std::vector<double>& v) { return Tensor::vector(v); }

}  // namespace

NormStats compute_stats(const Tensor& raw) {
  if (raw.rank() != 3) throw ShapeError("compute_stats", "expected [N, C, L], got " + shape_str(raw.shape()));
  const std::size_t n = raw.dim(0), nc = raw.dim(1), len = raw.dim(2);
  NormStats s;
  s.z_min.assign(nc, INFINITY);
  s.z_max.assign(nc, -INFINITY);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t l = 0; l < len; ++l) {
        const double v = raw(i, c, l);
        s.z_min[c] = std::min(s.z_min[c], v);
        s.z_max[c] = std::max(s.z_max[c], v);
      }
  return s;
}

Tensor normalize(const Tensor& raw, const NormStats& stats) {
  check_channels("normalize", raw, stats);
  const std::size_t len = raw.shape().back();
  const std::size_t nc = stats.channels();
  Tensor z(raw.shape());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const std::size_t c = (i / len) % nc;
    z[i] = 2.0 * (raw[i] - stats.z_min[c]) / stats.scale(c) - 1.0;
  }
  return z;
}

Tensor denormalize(const Tensor& z, const NormStats& stats) {
  check_channels("denormalize", z, stats);
  const auto [a, b] = denorm_coefficients(z.shape(), stats);
  Tensor x(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) x[i] = z[i] * a[i] + b[i];
  return x;
}

Var denormalize(const Var& z, const NormStats& stats) {
  check_channels("denormalize", z.value(), stats);
  auto [a, b] = denorm_coefficients(z.shape(), stats);
  Tape& tape = *z.tape();
  return z * tape.constant(std::move(a)) + tape.constant(std::move(b));
}

Tensor TrajectorySet::trajectory(std::size_t i) const {
  const std::size_t nc = channels(), len = length();
  Tensor out(Shape{nc, len});
  std::copy_n(&Z.data()[i * nc * len], nc * len, out.data().begin());
  return out;
}

RawTrajectory simulate_trajectory(const SystemSpec& spec, const CorpusOptions& opts, Rng& rng) {
  if (opts.length == 0 || opts.transient == 0) {
    throw std::invalid_argument("simulate_trajectory: length and transient must be positive");
  }
  const std::size_t substeps = opts.substeps ? opts.substeps : spec.groundtruth_substeps;
  std::size_t rejections = 0;
  for (;;) {
    ParamVector p = sample_params(spec, opts.condition, rng);
    const auto x0 = sample_initial_state(spec, p, rng);
    try {
      const Tensor full =
          dp45_rollout(spec, x0, p, opts.dt, opts.transient + opts.length - 1, substeps);
      Tensor states(Shape{opts.length, spec.state_dim});
      std::copy_n(&full.data()[opts.transient * spec.state_dim], states.size(),
                  states.data().begin());
      return RawTrajectory{std::move(p), std::move(states), rejections};
    } catch (const BoundExceeded&) {
      if (++rejections > opts.max_rejections) {
        throw std::runtime_error(spec.name + ": more than " + std::to_string(opts.max_rejections) +
                                 " consecutive rollouts left the amplitude bound; the parameter "
                                 "box likely produces divergent dynamics");
      }
    }
  }
}

Tensor pack_joint(const RawTrajectory& traj) {
  const std::size_t len = traj.states.dim(0), ds = traj.states.dim(1);
  const std::size_t dp = traj.params.size();
  Tensor z(Shape{ds + dp, len});
  for (std::size_t l = 0; l < len; ++l) {
    for (std::size_t c = 0; c < ds; ++c) z(c, l) = traj.states(l, c);
    for (std::size_t c = 0; c < dp; ++c) z(ds + c, l) = traj.params[c];
  }
  return z;
}

std::string solver_deviation_note(const SystemSpec& spec, std::size_t substeps) {
  std::ostringstream os;
  os << "ground truth from fixed-step DP5 with " << substeps
     << " substeps per interval for " << spec.name
     << "; adaptive-solver rtol/atol/max_step do not apply";
  return os.str();
}

namespace {

TrajectorySet build_corpus(const SystemSpec& spec, const CorpusOptions& opts,
                           const NormStats* stats) {
  if (opts.n_traj == 0) throw std::invalid_argument("generate_corpus: n_traj must be positive");
  const std::size_t nc = spec.channels(), len = opts.length;
  Tensor raw(Shape{opts.n_traj, nc, len});
  Tensor params(Shape{opts.n_traj, spec.param_dim});
  for (std::size_t i = 0; i < opts.n_traj; ++i) {
    Rng rng = make_rng(opts.seed, i);
    const auto traj = simulate_trajectory(spec, opts, rng);
    const Tensor joint = pack_joint(traj);
    std::copy(joint.data().begin(), joint.data().end(), &raw.data()[i * nc * len]);
    for (std::size_t p = 0; p < spec.param_dim; ++p) params(i, p) = traj.params[p];
  }
  TrajectorySet set;
  set.stats = stats ? *stats : compute_stats(raw);
  set.Z = normalize(raw, set.stats);
  set.params = std::move(params);
  set.dt = opts.dt;
  const std::size_t substeps = opts.substeps ? opts.substeps : spec.groundtruth_substeps;
  set.meta = CorpusMeta{spec.name, opts.condition, substeps, opts.seed, opts.transient,
                        solver_deviation_note(spec, substeps)};
  if (opts.condition == Condition::OOD && spec.ood_box.empty()) {
    set.meta.note += "; OOD parameters drawn from ID box side bands widened by " +
                     std::to_string(static_cast<int>(spec.ood_widening * 100)) + "% per side";
  }
  return set;
}

}  // namespace

TrajectorySet generate_corpus(const SystemSpec& spec, const CorpusOptions& opts) {
  return build_corpus(spec, opts, nullptr);
}

TrajectorySet generate_corpus(const SystemSpec& spec, const CorpusOptions& opts,
                              const NormStats& stats) {
  if (stats.channels() != spec.channels()) {
    throw ShapeError("generate_corpus", Shape{stats.channels()}, Shape{spec.channels()});
  }
  return build_corpus(spec, opts, &stats);
}

std::size_t ObservationSet::count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

std::vector<std::size_t> ObservationSet::indices() const {
  std::vector<std::size_t> idx;
  for (std::size_t l = 0; l < mask.size(); ++l)
    if (mask[l]) idx.push_back(l);
  return idx;
}

ObservationSet make_observations(const Tensor& states, double density, double sigma, Rng& rng) {
  if (!(density > 0.0 && density <= 1.0)) {
    throw std::invalid_argument("make_observations: density must lie in (0, 1]");
  }
  if (states.rank() != 2) {
    throw ShapeError("make_observations", "expected [D_s, L], got " + shape_str(states.shape()));
  }
  const std::size_t ds = states.dim(0), len = states.dim(1);
  const auto k = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(density * static_cast<double>(len))), 1, len);
  std::vector<std::size_t> order(len);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::sort(order.begin(), order.begin() + static_cast<long>(k));

  ObservationSet obs;
  obs.mask.assign(len, 0);
  obs.y = Tensor(Shape{ds, len});
  obs.noise_sigma = sigma;
  obs.density = density;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t n = 0; n < k; ++n) {
    const std::size_t l = order[n];
    obs.mask[l] = 1;
    for (std::size_t c = 0; c < ds; ++c) obs.y(c, l) = states(c, l) + sigma * noise(rng);
  }
  return obs;
}

void put_stats(Archive& a, const NormStats& stats) {
  a.set("stats.min", stats_tensor(stats.z_min));
  a.set("stats.max", stats_tensor(stats.z_max));
  a.set("stats.eps", stats.eps);
}

NormStats get_stats(const Archive& a) {
  NormStats s;
  const auto& mn = a.get_tensor("stats.min").storage();
  const auto& mx = a.get_tensor("stats.max").storage();
  s.z_min.assign(mn.begin(), mn.end());
  s.z_max.assign(mx.begin(), mx.end());
  s.eps = a.get_real("stats.eps");
  return s;
}

Archive to_archive(const TrajectorySet& set) {
  Archive a("corpus");
  a.set("system", set.meta.system);
  a.set("condition", std::string(to_string(set.meta.condition)));
  a.set("substeps", static_cast<std::int64_t>(set.meta.substeps));
  a.set("seed", static_cast<std::int64_t>(set.meta.seed));
  a.set("transient", static_cast<std::int64_t>(set.meta.transient));
  a.set("note", set.meta.note);
  a.set("dt", set.dt);
  a.set("Z", set.Z);
  a.set("params", set.params);
  put_stats(a, set.stats);
  return a;
}

TrajectorySet corpus_from_archive(const Archive& a) {
  TrajectorySet set;
  set.meta.system = a.get_string("system");
  set.meta.condition = parse_condition(a.get_string("condition"));
  set.meta.substeps = static_cast<std::size_t>(a.get_int("substeps"));
  set.meta.seed = static_cast<std::uint64_t>(a.get_int("seed"));
  set.meta.transient = static_cast<std::size_t>(a.get_int("transient"));
  set.meta.note = a.get_string("note");
  set.dt = a.get_real("dt");
  set.Z = a.get_tensor("Z");
  set.params = a.get_tensor("params");
  set.stats = get_stats(a);
  if (set.Z.rank() != 3 || set.Z.dim(1) != set.stats.channels()) {
    throw StoreError(StoreError::Code::WrongType, "corpus Z does not match its NormStats");
  }
  return set;
}

void save_corpus(const std::filesystem::path& path, const TrajectorySet& set) {
  to_archive(set).save(path);
}

TrajectorySet load_corpus(const std::filesystem::path& path) {
  return corpus_from_archive(Archive::load(path, "corpus"));
}

Archive to_archive(const ObservationBatch& batch) {
  Archive a("observations");
  a.set("system", batch.system);
  a.set("dt", batch.dt);
  put_stats(a, batch.stats);
  const std::size_t n = batch.obs.size();
  const std::size_t len = n ? batch.obs[0].length() : 0;
  const std::size_t ds = n ? batch.obs[0].y.dim(0) : 0;
  Tensor mask(Shape{n, len}), y(Shape{n, ds, len});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l = 0; l < len; ++l) mask(i, l) = batch.obs[i].mask[l];
    std::copy(batch.obs[i].y.data().begin(), batch.obs[i].y.data().end(),
              &y.data()[i * ds * len]);
  }
  a.set("mask", std::move(mask));
  a.set("y", std::move(y));
  a.set("noise_sigma", n ? batch.obs[0].noise_sigma : 0.0);
  a.set("density", n ? batch.obs[0].density : 0.0);
  a.set("truth", batch.truth);
  a.set("params", batch.params);
  return a;
}

ObservationBatch observations_from_archive(const Archive& a) {
  ObservationBatch b;
  b.system = a.get_string("system");
  b.dt = a.get_real("dt");
  b.stats = get_stats(a);
  const Tensor& mask = a.get_tensor("mask");
  const Tensor& y = a.get_tensor("y");
  const std::size_t n = mask.dim(0), len = mask.dim(1), ds = y.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    ObservationSet o;
    o.mask.resize(len);
    for (std::size_t l = 0; l < len; ++l) o.mask[l] = mask(i, l) != 0.0 ? 1 : 0;
    o.y = Tensor(Shape{ds, len});
    std::copy_n(&y.data()[i * ds * len], ds * len, o.y.data().begin());
    o.noise_sigma = a.get_real("noise_sigma");
    o.density = a.get_real("density");
    b.obs.push_back(std::move(o));
  }
  b.truth = a.get_tensor("truth");
  b.params = a.get_tensor("params");
  return b;
}

void save_observations(const std::filesystem::path& path, const ObservationBatch& batch) {
  to_archive(batch).save(path);
}

ObservationBatch load_observations(const std::filesystem::path& path) {
  return observations_from_archive(Archive::load(path, "observations"));
}

}  // namespace pidm
