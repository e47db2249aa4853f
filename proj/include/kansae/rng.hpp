#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace kansae {

// FNV-1a, used to fan a single experiment seed out into named streams.
inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// Stream derivation: seed XOR hash of the stream name.
inline uint64_t derive_seed(uint64_t seed, std::string_view stream) {
    return seed ^ fnv1a64(stream);
}

// mt19937_64 with hand-rolled variate transforms. The standard pins the
// engine's output bit-for-bit but not the distributions', so the transforms
// live here to keep runs reproducible across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n), rejection sampled.
    uint64_t uniform_below(uint64_t n) {
        const uint64_t excess = (0 - n) % n;  // 2^64 mod n
        uint64_t r = gen_();
        while (r < excess) r = gen_();
        return r % n;
    }

    // Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Exp(1) by inversion.
    double exponential() { return -std::log(1.0 - uniform()); }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace kansae
