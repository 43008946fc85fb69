#pragma once

#include <cmath>
#include <cstdint>

#include "hydroseq/common.hpp"

namespace hydroseq {

// Deterministic splittable stream built on SplitMix64 (Steele, Lea & Flood 2014).
// The state walks a Weyl sequence (increment 0x9E3779B97F4A7C15) and each output
// is a finalizer hash of the state, so the generator is effectively counter-based:
// identical seed + identical call sequence gives bit-identical output on every
// platform and thread count. split(key) derives an independent child stream
// without perturbing the parent.
class RngStream {
  public:
    explicit RngStream(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        return mix(state_);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) {
        if (!(a < b)) throw ParameterError("uniform: require a < b");
        return a + (b - a) * next_double();
    }

    // Box-Muller, two draws per sample (no caching, keeps call sequences simple).
    double gaussian(double mu, double sigma) {
        if (!(sigma > 0)) throw ParameterError("gaussian: require sigma > 0");
        const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        const double u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mu + sigma * r * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Child stream keyed off the current state; the parent is not advanced.
    RngStream split(std::uint64_t key) const {
        return RngStream(mix(state_ ^ mix(key + 0x9E3779B97F4A7C15ull)));
    }

  private:
    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ull;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBull;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t state_;
};

}  // namespace hydroseq
