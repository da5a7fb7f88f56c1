#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "rmarn/num/tensor.hpp"

namespace rmarn::num {

// Seedable generator threaded explicitly through initialization, dropout and
// data sampling. Gaussian draws use a plain Box-Muller transform (no cached
// spare, no distribution objects) so the byte stream depends only on the seed
// and the call sequence, not on the standard library implementation.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        // Rejection sampling keeps the draw exactly uniform.
        uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % span;
        uint64_t v = eng_();
        while (v >= limit) v = eng_();
        return lo + static_cast<int64_t>(v % span);
    }

    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void fill_normal(TensorT<T>& t, double mean, double stddev) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(normal(mean, stddev));
    }

    template <typename T>
    void fill_uniform(TensorT<T>& t, double lo, double hi) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(uniform(lo, hi));
    }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = last - first;
        for (auto i = n - 1; i > 0; --i) {
            auto j = uniform_int(0, i);
            std::swap(first[i], first[j]);
        }
    }

    // Stable seed derivation for independent sub-streams (splitmix64 mix).
    static uint64_t derive(uint64_t seed, uint64_t tag) {
        uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace rmarn::num
