#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace pidm {

using Rng = std::mt19937_64;

/// One round of the splitmix64 finaliser.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based seed for the `index`-th independent substream of `master`.
constexpr std::uint64_t substream_seed(std::uint64_t master, std::uint64_t index) noexcept {
  return splitmix64(splitmix64(master) ^ splitmix64(index + 0x5851f42d4c957f2dULL));
}

inline Rng make_rng(std::uint64_t master, std::uint64_t index) {
  return Rng(substream_seed(master, index));
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline void fill_normal(Rng& rng, std::span<double> out, double sigma = 1.0) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : out) v = sigma * dist(rng);
}

}  // namespace pidm
