// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace diffpo {

/// Mixes (base, stream) into an independent child seed (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// Deterministic randomness handle.
///
/// The engine is std::mt19937_64 (its output sequence is fixed by the
/// standard); uniform and normal variates are built from raw 64-bit draws
/// here rather than through std:: distributions, whose algorithms are
/// implementation-defined. Every draw sequence is therefore reproducible
/// across compilers and standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1), 53 random bits.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller; the spare deviate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log1p(-u1));  // 1-u1 in (0,1]
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    std::vector<double> normal_vec(std::size_t n) {
        std::vector<double> v(n);
        for (auto& x : v) {
            x = normal();
        }
        return v;
    }

    /// Unbiased integer in [lo, hi], inclusive. Requires lo <= hi.
    int uniform_int(int lo, int hi) {
        const std::uint64_t n = static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1;
        const std::uint64_t limit = n * (UINT64_MAX / n);
        std::uint64_t u = next_u64();
        while (u >= limit) {
            u = next_u64();
        }
        return lo + static_cast<int>(u % n);
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Named sub-streams used when one run seed fans out into independent
// generators. Monitoring draws never share a stream with training draws.
enum : std::uint64_t {
    kStreamTrain = 1,
    kStreamMonitor = 2,
    kStreamData = 3,
    kStreamInit = 4,
    kStreamEval = 5,
};

}  // namespace diffpo
