#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace voxseg {

// Deterministic random stream. mt19937_64 is fully specified by the standard
// and the derived draws below avoid std::*_distribution, whose output is
// implementation-defined, so streams are stable across platforms.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n); n must be > 0
    std::uint64_t uniform_index(std::uint64_t n) { return gen_() % n; }

    // Box-Muller; consumes exactly two uniforms per draw
    double normal(double mean, double sigma) {
        const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + sigma * r * std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
    }

  private:
    std::mt19937_64 gen_;
};

// splitmix64; used to derive independent stream seeds from a base seed
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    return mix_seed(a ^ mix_seed(b));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix_seed(mix_seed(a, b) ^ mix_seed(c));
}

}  // namespace voxseg
