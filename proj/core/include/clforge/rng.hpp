#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace clforge {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent RNG streams derived from one master seed.
enum class Stream : std::uint64_t {
  kTaskGen = 1,
  kShuffle = 2,
  kReplay = 3,
  kAdapterInit = 4,
  kModelInit = 5,
  kPretrain = 6,
};

inline std::uint64_t derive_seed(std::uint64_t master, Stream stream, std::uint64_t index = 0) {
  return splitmix64(splitmix64(master ^ (static_cast<std::uint64_t>(stream) << 56)) + index);
}

inline Rng make_rng(std::uint64_t master, Stream stream, std::uint64_t index = 0) {
  return Rng(derive_seed(master, stream, index));
}

// Portable replacements for <random> distributions, whose output is
// implementation-defined.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

inline double normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace clforge
