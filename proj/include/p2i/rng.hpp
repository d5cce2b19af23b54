#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace p2i {

// Deterministic random source. One master seed; named substreams derive
// independent, reproducible streams so modules never perturb each other's
// draws. Distributions are implemented here (not via <random> distribution
// classes, whose output is not pinned by the standard).
class RandomSource {
public:
    explicit RandomSource(std::uint64_t seed) : seed_(seed), eng_(splitmix(seed)) {}

    RandomSource substream(std::string_view name) const {
        return RandomSource(splitmix(seed_ ^ fnv1a(name)));
    }

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, bound).
    std::uint64_t below(std::uint64_t bound) {
        std::uint64_t threshold = (~bound + 1) % bound; // 2^64 mod bound
        for (;;) {
            std::uint64_t r = eng_();
            if (r >= threshold) return r % bound;
        }
    }

    // Standard normal via Marsaglia polar.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        has_spare_ = true;
        return u * f;
    }

    static std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        return h;
    }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::uint64_t seed_;
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline RandomSource seeded_rng(std::uint64_t seed) { return RandomSource(seed); }

} // namespace p2i
