#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace metagp {

// Deterministic counter-based generator (splitmix64). Self-contained so that
// streams are bit-reproducible across platforms and standard libraries.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform on [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; second variate cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    // uniform integer in [0, n)
    std::uint64_t uniform_int(std::uint64_t n) {
        // rejection sampling to avoid modulo bias
        const std::uint64_t lim = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next_u64();
        while (x >= lim) x = next_u64();
        return x % n;
    }

private:
    std::uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

// One global run seed fans out to named module streams. Adding a new stream
// (or parallelizing an existing one by index) never perturbs the others.
class RngRoot {
public:
    explicit RngRoot(std::uint64_t seed) : seed_(seed) {}

    RngStream stream(std::string_view name, std::uint64_t index = 0) const {
        // FNV-1a over the name, mixed with the seed and index
        std::uint64_t h = 14695981039346656037ULL;
        for (char c : name) {
            h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
            h *= 1099511628211ULL;
        }
        h ^= seed_ + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        h ^= index * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL;
        return RngStream(h);
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
};

}  // namespace metagp
