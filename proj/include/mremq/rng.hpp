#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace mremq {

// Deterministic RNG wrapper. All draws are implemented on top of the raw
// mt19937_64 stream (which the standard pins bit-exactly) instead of
// std::*_distribution, so runs reproduce across standard library versions.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double next_unit() {
        return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double next_real(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    // Uniform integer in [0, n), n >= 1. Rejection sampling, unbiased.
    uint64_t next_below(uint64_t n) {
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = gen_();
        while (x >= limit) x = gen_();
        return x % n;
    }

    int next_int(int lo, int hi_exclusive) {
        return lo + static_cast<int>(next_below(static_cast<uint64_t>(hi_exclusive - lo)));
    }

    // Box-Muller with a cached spare.
    double next_normal(double mean = 0.0, double stddev = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1 = next_unit();
        while (u1 <= 0.0) u1 = next_unit();
        const double u2 = next_unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mean + stddev * r * std::cos(theta);
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Stable sub-stream derivation: one root seed fans out into independent
// streams keyed by a tag (and an optional index), e.g. per-worker RNGs.
inline uint64_t derive_seed(uint64_t root, std::string_view tag, uint64_t index = 0) {
    uint64_t h = 1469598103934665603ull;  // FNV-1a offset basis
    auto mix_byte = [&h](uint8_t b) {
        h ^= b;
        h *= 1099511628211ull;
    };
    for (char c : tag) mix_byte(static_cast<uint8_t>(c));
    for (int i = 0; i < 8; ++i) mix_byte(static_cast<uint8_t>(index >> (8 * i)));
    for (int i = 0; i < 8; ++i) mix_byte(static_cast<uint8_t>(root >> (8 * i)));
    // splitmix64 finalizer
    h += 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    return h ^ (h >> 31);
}

}  // namespace mremq
