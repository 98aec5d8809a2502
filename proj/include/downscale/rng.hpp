#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace downscale {

// Deterministic counter-free PRNG (splitmix64 core). Self-contained so that
// every generated byte is reproducible from a seed across builds, independent
// of standard-library distribution internals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller (consumes two uniforms per draw)
    double gaussian() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    // integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    // Derive an independent stream; mixing is injective enough for the handful
    // of streams used here (splits, per-sample seeds, per-cell seeds).
    Rng split(std::uint64_t stream) const {
        std::uint64_t s = state_ ^ (0x9e3779b97f4a7c15ULL * (stream + 0x632be59bd9b4e019ULL));
        s = (s ^ (s >> 30)) * 0xbf58476d1ce4e5b9ULL;
        return Rng(s ^ (s >> 27));
    }

private:
    std::uint64_t state_;
};

// Fisher-Yates shuffle with the deterministic Rng.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(v[i - 1], v[j]);
    }
}

} // namespace downscale
