// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace ctlab {

using Rng = std::mt19937_64;

/// SplitMix64 finaliser; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Stateless seed derivation: the same (root, tags...) always yields the same
/// seed, so per-scene and per-step randomness is schedule independent.
constexpr std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = mix64(root);
  for (std::uint64_t t : tags) h = mix64(h ^ mix64(t + 0x632BE59BD9B4E019ull));
  return h;
}

// Stream tags.
enum class Stream : std::uint64_t {
  kLabeledPool = 1,
  kUnlabeledPool = 2,
  kTestPool = 3,
  kInit = 10,
  kBatchLabeled = 11,
  kBatchUnlabeled = 12,
  kAugLabeled = 13,
  kAugUnlabeledWeak = 14,
  kAugUnlabeledStrong = 15,
};

inline std::uint64_t derive_seed(std::uint64_t root, Stream s, std::uint64_t a = 0,
                                 std::uint64_t b = 0) {
  return derive_seed(root, {static_cast<std::uint64_t>(s), a, b});
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline bool bernoulli(Rng& rng, double p) { return std::bernoulli_distribution(p)(rng); }

}  // namespace ctlab
