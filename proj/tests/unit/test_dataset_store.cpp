#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "pidm/dataset.hpp"

using namespace pidm;
namespace fs = std::filesystem;

namespace {

CorpusOptions small_opts(std::size_t n = 4, std::size_t len = 32) {
  CorpusOptions o;
  o.n_traj = n;
  o.length = len;
  o.transient = 200;
  o.seed = 5;
  return o;
}

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "pidm_unit";
  fs::create_directories(dir);
  return dir / name;
}

Tensor state_rows(const Tensor& joint, std::size_t ds) {
  Tensor s(Shape{ds, joint.dim(1)});
  std::copy_n(joint.data().begin(), s.size(), s.data().begin());
  return s;
}

}  // namespace

TEST(Normalization, TrainingSplitMapsIntoUnitBox) {
  const auto set = generate_corpus(system_by_name("lorenz"), small_opts());
  EXPECT_EQ(set.Z.shape(), (Shape{4, 6, 32}));
  for (std::size_t c = 0; c < 6; ++c) {
    double lo = 1e9, hi = -1e9;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t l = 0; l < 32; ++l) {
        lo = std::min(lo, set.Z(i, c, l));
        hi = std::max(hi, set.Z(i, c, l));
      }
    EXPECT_NEAR(lo, -1.0, 1e-6) << c;
    EXPECT_NEAR(hi, 1.0, 1e-6) << c;
  }
}

TEST(Normalization, RoundTripAndTapeAgreement) {
  NormStats stats{{-2.0, 0.0}, {3.0, 10.0}, 1e-8};
  const Tensor raw(Shape{2, 3}, std::vector<double>{-2.0, 0.5, 3.0, 0.0, 7.0, 10.0});
  const Tensor z = normalize(raw, stats);
  EXPECT_NEAR(z(0, 0), -1.0, 1e-9);
  EXPECT_NEAR(z(1, 2), 1.0, 1e-8);
  EXPECT_NEAR(z(0, 1), 2.0 * 2.5 / (5.0 + 1e-8) - 1.0, 1e-15);
  const Tensor back = denormalize(z, stats);
  for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_NEAR(back[i], raw[i], 1e-12);
  Tape tape;
  const Tensor via_tape = denormalize(tape.constant(z), stats).value();
  for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_NEAR(via_tape[i], back[i], 1e-14);
  EXPECT_THROW(normalize(Tensor(Shape{3, 3}), stats), ShapeError);
}

TEST(Normalization, SymmetricChannelAndRandomRoundTrip) {
  NormStats stats{{-10.0, -3.0}, {10.0, 5.0}, 1e-8};
  const Tensor raw(Shape{2, 1}, std::vector<double>{0.0, -3.0});
  const Tensor z = normalize(raw, stats);
  EXPECT_NEAR(z(0, 0), 0.0, 1e-9);
  EXPECT_NEAR(z(1, 0), -1.0, 1e-15);
  Rng rng(4);
  Tensor big(Shape{5, 2, 40});
  for (double& v : big.data()) v = uniform(rng, -20.0, 20.0);
  const Tensor back = denormalize(normalize(big, stats), stats);
  double worst = 0.0;
  for (std::size_t i = 0; i < big.size(); ++i) worst = std::max(worst, std::abs(back[i] - big[i]));
  EXPECT_LT(worst, 1e-12);
}

TEST(Corpus, DeskScaleGenerationTerminatesForAllSystems) {
  for (const auto& spec : all_systems()) {
    CorpusOptions o;
    o.n_traj = 64;
    o.length = 128;
    o.seed = 42;
    const auto set = generate_corpus(spec, o);
    EXPECT_EQ(set.Z.shape(), (Shape{64, spec.channels(), 128})) << spec.name;
    double lo = 0.0, hi = 0.0;
    for (double v : set.Z.data()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    EXPECT_GE(lo, -1.0 - 1e-6) << spec.name;
    EXPECT_LE(hi, 1.0 + 1e-6) << spec.name;
  }
}

TEST(Corpus, DeterministicInSeed) {
  const auto& spec = system_by_name("rossler");
  const auto a = generate_corpus(spec, small_opts());
  const auto b = generate_corpus(spec, small_opts());
  EXPECT_EQ(a.Z, b.Z);
  EXPECT_EQ(a.params, b.params);
  auto other = small_opts();
  other.seed = 6;
  EXPECT_NE(generate_corpus(spec, other).Z, a.Z);
}

TEST(Corpus, ParameterChannelsAreConstantInTime) {
  const auto set = generate_corpus(system_by_name("lorenz"), small_opts(3, 16));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 3; c < 6; ++c)
      for (std::size_t l = 1; l < 16; ++l) EXPECT_EQ(set.Z(i, c, l), set.Z(i, c, 0));
  const Tensor phys = denormalize(set.trajectory(1), set.stats);
  for (std::size_t p = 0; p < 3; ++p) EXPECT_NEAR(phys(3 + p, 5), set.params(1, p), 1e-9);
}

TEST(Corpus, ExternalStatsAndMetadata) {
  const auto& spec = system_by_name("hyper5d");
  const auto train = generate_corpus(spec, small_opts(3, 16));
  auto opts = small_opts(2, 16);
  opts.condition = Condition::OOD;
  opts.seed = 9;
  const auto test = generate_corpus(spec, opts, train.stats);
  EXPECT_EQ(test.stats.z_min, train.stats.z_min);
  EXPECT_EQ(test.meta.condition, Condition::OOD);
  EXPECT_EQ(test.meta.substeps, spec.groundtruth_substeps);
  EXPECT_NE(test.meta.note.find("side band"), std::string::npos) << test.meta.note;
  NormStats wrong{{0.0}, {1.0}, 1e-8};
  EXPECT_THROW(generate_corpus(spec, opts, wrong), ShapeError);
}

TEST(Corpus, RejectionBudgetIsEnforced) {
  auto opts = small_opts(1, 8);
  opts.max_rejections = 2;
  opts.substeps = 1;
  opts.dt = 0.5;
  const auto& spec = system_by_name("lorenz");
  // A single 0.5 step per interval is far outside the stability region, so every draw blows up.
  EXPECT_THROW(generate_corpus(spec, opts), std::runtime_error);
}

TEST(Observations, CountOrderAndNoise) {
  const auto set = generate_corpus(system_by_name("lorenz"), small_opts(1, 128));
  const Tensor states = state_rows(set.trajectory(0), 3);
  Rng rng(3);
  const ObservationSet obs = make_observations(states, 0.10, 0.0, rng);
  EXPECT_EQ(obs.count(), 13u);
  const auto idx = obs.indices();
  EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
  EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), idx.size());
  for (std::size_t l = 0; l < 128; ++l)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(obs.y(c, l), obs.mask[l] ? states(c, l) : 0.0);

  Rng noisy(3);
  const ObservationSet with_noise = make_observations(states, 0.10, 0.05, noisy);
  EXPECT_EQ(with_noise.indices(), idx);
  double sq = 0.0;
  for (std::size_t k : idx)
    for (std::size_t c = 0; c < 3; ++c) sq += std::pow(with_noise.y(c, k) - states(c, k), 2);
  EXPECT_GT(std::sqrt(sq / 39.0), 0.02);
  EXPECT_LT(std::sqrt(sq / 39.0), 0.1);
}

TEST(Observations, DensityCountsAndNoiseLevel) {
  Rng rng(5);
  const Tensor states(Shape{3, 1000});
  EXPECT_EQ(make_observations(states, 0.10, 0.05, rng).count(), 100u);
  const auto all = make_observations(states, 1.0, 0.0, rng);
  EXPECT_EQ(all.count(), 1000u);
  // States are zero, so y is pure noise at observed entries.
  double sq = 0.0;
  std::size_t n = 0;
  for (int rep = 0; rep < 20; ++rep) {
    const auto obs = make_observations(states, 0.5, 0.05, rng);
    for (std::size_t k : obs.indices())
      for (std::size_t c = 0; c < 3; ++c) {
        sq += obs.y(c, k) * obs.y(c, k);
        ++n;
      }
  }
  const double sd = std::sqrt(sq / static_cast<double>(n));
  EXPECT_GT(sd, 0.045);
  EXPECT_LT(sd, 0.055);
}

TEST(Observations, AtLeastOneIndex) {
  Rng rng(1);
  const auto obs = make_observations(Tensor(Shape{3, 8}), 0.01, 0.0, rng);
  EXPECT_EQ(obs.count(), 1u);
  EXPECT_THROW(make_observations(Tensor(Shape{3, 8}), 0.0, 0.0, rng), std::invalid_argument);
}

TEST(Store, CorpusRoundTripIsBitExact) {
  const auto set = generate_corpus(system_by_name("lorenz96"), small_opts(2, 16));
  const auto path = temp_file("corpus.pidm");
  save_corpus(path, set);
  const auto back = load_corpus(path);
  EXPECT_EQ(back.Z, set.Z);
  EXPECT_EQ(back.params, set.params);
  EXPECT_EQ(back.stats.z_min, set.stats.z_min);
  EXPECT_EQ(back.stats.z_max, set.stats.z_max);
  EXPECT_EQ(back.meta.system, "lorenz96");
  EXPECT_EQ(back.meta.seed, set.meta.seed);
  EXPECT_EQ(to_archive(back).serialize(), to_archive(set).serialize());
}

TEST(Store, ObservationRoundTrip) {
  const auto set = generate_corpus(system_by_name("lorenz"), small_opts(2, 32));
  ObservationBatch batch;
  batch.system = "lorenz";
  batch.stats = set.stats;
  batch.truth = set.Z;
  batch.params = set.params;
  for (std::size_t i = 0; i < 2; ++i) {
    Rng rng(i);
    batch.obs.push_back(make_observations(state_rows(set.trajectory(i), 3), 0.2, 0.05, rng));
  }
  const auto path = temp_file("obs.pidm");
  save_observations(path, batch);
  const auto back = load_observations(path);
  ASSERT_EQ(back.obs.size(), 2u);
  EXPECT_EQ(back.obs[1].mask, batch.obs[1].mask);
  EXPECT_EQ(back.obs[1].y, batch.obs[1].y);
  EXPECT_EQ(back.truth, batch.truth);
  EXPECT_DOUBLE_EQ(back.obs[0].density, 0.2);
}

TEST(Store, ArchiveValueTypes) {
  Archive a("test");
  a.set("s", std::string("text"));
  a.set("r", 0.1);
  a.set("i", std::int64_t{-7});
  a.set("t", Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3, 4}));
  const Archive b = Archive::deserialize(a.serialize());
  EXPECT_EQ(b.kind(), "test");
  EXPECT_EQ(b.get_string("s"), "text");
  EXPECT_EQ(b.get_real("r"), 0.1);
  EXPECT_EQ(b.get_int("i"), -7);
  EXPECT_EQ(b.get_tensor("t")(1, 0), 3.0);
  EXPECT_EQ(a.serialize(), b.serialize());
}

TEST(Store, ErrorsAreTyped) {
  Archive a("kind");
  a.set("x", 1.0);
  const std::string bytes = a.serialize();
  auto code_of = [](const auto& fn) {
    try {
      fn();
    } catch (const StoreError& e) {
      return e.code();
    }
    ADD_FAILURE() << "no StoreError";
    return StoreError::Code::Io;
  };
  EXPECT_EQ(code_of([&] { Archive::deserialize("XXXX" + bytes.substr(4)); }), StoreError::Code::BadMagic);
  EXPECT_EQ(code_of([&] { Archive::deserialize(bytes.substr(0, bytes.size() - 3)); }), StoreError::Code::Truncated);
  std::string bumped = bytes;
  bumped[4] = 9;
  EXPECT_EQ(code_of([&] { Archive::deserialize(bumped); }), StoreError::Code::BadVersion);
  EXPECT_EQ(code_of([&] { (void)a.get_real("missing"); }), StoreError::Code::MissingField);
  EXPECT_EQ(code_of([&] { (void)a.get_string("x"); }), StoreError::Code::WrongType);
  const auto path = temp_file("kind.pidm");
  a.save(path);
  EXPECT_EQ(code_of([&] { Archive::load(path, "corpus"); }), StoreError::Code::WrongKind);
  EXPECT_EQ(code_of([&] { Archive::load(temp_file("absent.pidm")); }), StoreError::Code::Io);
}

TEST(Store, AtomicWriteReplacesContents) {
  const auto path = temp_file("atomic.txt");
  write_file_atomic(path, "first");
  write_file_atomic(path, "second");
  std::ifstream in(path);
  std::string s;
  std::getline(in, s);
  EXPECT_EQ(s, "second");
}
