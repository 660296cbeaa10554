#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace boneage {

// All randomness goes through mt19937_64 plus the explicit transforms below.
// The engine's output sequence is fixed by the standard; by not using
// std::*_distribution we get the same draws on every platform and stdlib.
using Rng = std::mt19937_64;

/// Uniform in [0,1) with 53 random bits.
inline double rand_unit(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double rand_uniform(Rng& rng, double lo, double hi) {
  return lo + rand_unit(rng) * (hi - lo);
}

/// Uniform integer in [0, n). n must be positive.
inline std::uint64_t rand_below(Rng& rng, std::uint64_t n) {
  return rng() % n;
}

inline bool rand_bernoulli(Rng& rng, double p) { return rand_unit(rng) < p; }

/// Standard normal via Box-Muller (cosine branch; two draws consumed).
inline double rand_normal(Rng& rng) {
  double u1 = 0.0;
  do {
    u1 = rand_unit(rng);
  } while (u1 <= 0.0);
  const double u2 = rand_unit(rng);
  constexpr double two_pi = 6.283185307179586476925286766559;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

/// Seeded Fisher-Yates shuffle (deterministic across platforms).
template <class T>
void shuffle_vec(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rand_below(rng, i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace boneage
