#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace voxseg {

// Deterministic draw helpers. Distribution code is spelled out (not
// std::*_distribution) so streams are bit-stable across standard libraries.

inline double uniform01(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

inline int64_t uniform_below(std::mt19937_64& rng, int64_t n) {
    return int64_t(rng() % uint64_t(n));
}

inline double uniform_range(std::mt19937_64& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform01(rng);
}

// Box-Muller; consumes exactly two uniforms per draw.
inline double normal01(std::mt19937_64& rng) {
    const double u1 = 1.0 - uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

// splitmix64 of (seed, k); decorrelates per-iteration RNG streams.
inline uint64_t mix_seed(uint64_t seed, uint64_t k) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (k + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace voxseg
