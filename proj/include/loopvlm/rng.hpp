#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace loopvlm {

// splitmix64 finalizer; used to derive independent stream seeds from
// (master seed, purpose tag, step, index) tuples so that runs are
// reproducible without carrying mutable RNG state across checkpoints.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(std::initializer_list<uint64_t> parts) {
    uint64_t s = 0x6a09e667f3bcc909ull;
    for (uint64_t p : parts) s = mix64(s ^ p);
    return s;
}

// mt19937_64 has a standard-specified output sequence; the distribution
// transforms below are hand-rolled because std::*_distribution sequences
// are implementation-defined and would break cross-toolchain determinism.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    // uniform in [0, 1) with 53 random bits
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    // uniform integer in [lo, hi] inclusive
    int uniform_int(int lo, int hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(eng_() % span);
    }

    // standard normal via Box-Muller, caching the spare deviate
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double radius = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * M_PI * u2;
        spare_ = radius * std::sin(theta);
        has_spare_ = true;
        return radius * std::cos(theta);
    }

    // Knuth product method; adequate for the lambda range used here
    int poisson(double lambda) {
        if (lambda <= 0.0) return 0;
        double limit = std::exp(-lambda);
        int k = 0;
        double prod = uniform();
        while (prod > limit) {
            ++k;
            prod *= uniform();
        }
        return k;
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace loopvlm
