#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace ditforge {

// splitmix64: tiny, fast, full-period 2^64 generator. Chosen over std::mt19937
// because the bit stream is trivially reproducible from a single u64 and cheap
// to fork into independent streams by hashing a key into the seed.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller; one value per call, no cached spare,
    // so the stream position is a pure function of the call count.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Normal(0, std) rejected until within [-2 std, 2 std].
    double trunc_normal(double stddev) {
        for (;;) {
            double v = normal() * stddev;
            if (std::fabs(v) <= 2.0 * stddev) return v;
        }
    }

private:
    uint64_t state_;
};

// FNV-1a over a string, used to key per-tensor parameter streams.
inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Mixes a base seed with a stream key so distinct keys give decorrelated
// streams even for adjacent seeds.
inline uint64_t mix_seed(uint64_t seed, uint64_t key) {
    uint64_t z = seed ^ (key + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline Rng named_stream(uint64_t seed, std::string_view name) {
    return Rng(mix_seed(seed, fnv1a(name)));
}

} // namespace ditforge
