#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "moetrack/common.hpp"

namespace moetrack {

// Mixes a purpose label into a master seed; equal inputs, equal output.
inline uint64_t derive_seed(uint64_t master, std::string_view label) {
    return master ^ (fnv1a64(label) * 0x9E3779B97F4A7C15ull);
}

// Deterministic seeded random stream. std::mt19937_64's output sequence is
// fully specified by the standard; the distribution helpers are hand-rolled
// because the standard library distributions are not, and identical seeds
// must give bit-identical results everywhere.
//
// Named sub-streams are derived by hashing a label into the master seed, so
// adding draws to one purpose never perturbs another.
class RngStream {
  public:
    explicit RngStream(uint64_t seed) : engine_(splitmix64(seed)) {}

    static RngStream substream(uint64_t master, std::string_view label) {
        return RngStream(derive_seed(master, label));
    }

    RngStream substream(std::string_view label) {
        // Derive from the stream's own state so repeated labels differ.
        return RngStream(next_u64() ^ fnv1a64(label));
    }

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform integer in [0, n). Multiply-shift; bias is O(n / 2^64).
    int uniform_int(int n) {
        if (n <= 0) throw ContractError("uniform_int: n must be positive, got " + std::to_string(n));
        return static_cast<int>((static_cast<unsigned __int128>(next_u64()) * static_cast<uint64_t>(n)) >> 64);
    }

    bool bernoulli(double p) { return uniform01() < p; }

    // Box-Muller with a cached second value.
    double normal(double mean = 0.0, double stddev = 1.0) {
        if (have_cached_) {
            have_cached_ = false;
            return mean + stddev * cached_;
        }
        double u1 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        cached_ = r * std::sin(theta);
        have_cached_ = true;
        return mean + stddev * r * std::cos(theta);
    }

    // k distinct indices from [0, n), in draw order (partial Fisher-Yates).
    std::vector<int> sample_without_replacement(int n, int k) {
        if (k > n) throw ContractError("sample_without_replacement: k > n");
        std::vector<int> pool(n);
        for (int i = 0; i < n; ++i) pool[i] = i;
        std::vector<int> out;
        out.reserve(k);
        for (int i = 0; i < k; ++i) {
            const int j = i + uniform_int(n - i);
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
        return out;
    }

  private:
    static uint64_t splitmix64(uint64_t x) {
        x += 0x9E3779B97F4A7C15ull;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
        return x ^ (x >> 31);
    }

    std::mt19937_64 engine_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

}  // namespace moetrack
