#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace misa {

// splitmix64 output function. Also used to derive independent substreams:
// mixing a seed with a stream tag gives decorrelated child seeds.
inline std::uint64_t splitmix64_step(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t s = seed ^ (0xA0761D6478BD642FULL + tag * 0xE7037ED1A0B428DBULL);
    return splitmix64_step(s);
}

// Deterministic generator used everywhere randomness matters. Hand-rolled so
// that artifacts are bit-reproducible across standard libraries (std::shuffle
// and std::*_distribution are implementation-defined).
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return splitmix64_step(state_); }

    // Substream generator, independent of draws taken from this one.
    Rng split(std::uint64_t tag) const { return Rng(mix_seed(state_, tag)); }

    // Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    float uniform_f(float lo, float hi) { return static_cast<float>(uniform(lo, hi)); }

    // Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
        const std::uint64_t rem = (0xFFFFFFFFFFFFFFFFULL % n + 1) % n;  // 2^64 mod n
        std::uint64_t x = next_u64();
        if (rem != 0) {
            const std::uint64_t lim = 0xFFFFFFFFFFFFFFFFULL - rem;  // last accepted value
            while (x > lim) x = next_u64();
        }
        return x % n;
    }

    // Standard normal via Box-Muller (pairs cached).
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // First k entries of a Fisher-Yates pass over [0, n): a uniformly random
    // k-subset in draw order. Callers that need set semantics sort the result.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        if (k > n)
            throw std::invalid_argument("Rng::sample_without_replacement: k=" + std::to_string(k) +
                                        " exceeds population " + std::to_string(n));
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(below(n - i));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(k);
        return idx;
    }

  private:
    std::uint64_t state_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace misa
