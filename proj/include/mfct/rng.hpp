#pragma once

#include <cmath>
#include <cstdint>

namespace mfct {

/// Counter-based random streams: every draw is a pure function of
/// (seed, stream, counter), so particle loops can run in any order and on any
/// number of workers without changing results.
///
/// The generator hashes the three words through two rounds of the splitmix64
/// finalizer, which passes the usual statistical batteries and is the common
/// choice for seeding/stateless use.
namespace rng {

inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t hash3(uint64_t seed, uint64_t stream, uint64_t counter) {
    uint64_t h = mix64(seed + 0x9e3779b97f4a7c15ULL);
    h = mix64(h ^ (stream + 0xbf58476d1ce4e5b9ULL));
    h = mix64(h ^ (counter + 0x94d049bb133111ebULL));
    return h;
}

/// Uniform in (0, 1); never returns exactly 0 or 1.
inline double uniform(uint64_t seed, uint64_t stream, uint64_t counter) {
    const uint64_t h = hash3(seed, stream, counter);
    return (static_cast<double>(h >> 11) + 0.5) * 0x1.0p-53;
}

/// Standard normal via Box-Muller; draw k selects an independent deviate
/// within the stream.
inline double normal(uint64_t seed, uint64_t stream, uint64_t k) {
    const double u1 = uniform(seed, stream, 2 * k);
    const double u2 = uniform(seed, stream, 2 * k + 1);
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925287 * u2);
}

} // namespace rng
} // namespace mfct
