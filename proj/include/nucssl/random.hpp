#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <iterator>
#include <numbers>
#include <random>
#include <utility>

namespace nucssl {

// All randomness in the library goes through Rng. std::mt19937_64 has a fully
// specified output sequence; the distributions below are written out by hand
// because the std:: distributions are implementation-defined, and splits and
// samples must match across platforms.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a list of stream
// coordinates (e.g. {step, sample}).
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> stream) {
    std::uint64_t h = splitmix64(base);
    for (std::uint64_t s : stream) {
        h = splitmix64(h ^ splitmix64(s + 0x632be59bd9b4e019ULL));
    }
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    std::uint64_t next() { return engine_(); }

    // Uniform integer in [lo, hi], inclusive. Rejection sampling, no modulo bias.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (hi <= lo) {
            return lo;
        }
        const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
        if (range == 0) {
            return static_cast<std::int64_t>(next());
        }
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        std::uint64_t v = next();
        while (v >= limit) {
            v = next();
        }
        return lo + static_cast<std::int64_t>(v % range);
    }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        while (u1 <= 0.0) {
            u1 = uniform01();
        }
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <std::random_access_iterator It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::int64_t>(std::distance(first, last));
        for (std::int64_t i = n - 1; i > 0; --i) {
            const std::int64_t j = uniform_int(0, i);
            using std::swap;
            swap(first[i], first[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace nucssl
