#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace streamloc {

// Deterministic RNG used everywhere. All distributions are hand-rolled on top
// of mt19937_64 so that a fixed seed reproduces identical streams on any
// platform (std::normal_distribution is implementation-defined).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo + 1);
        return lo + static_cast<std::int64_t>(gen_() % span);
    }

    // Box-Muller; one normal per call keeps replay order obvious.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    double log_uniform(double lo, double hi) {
        return std::exp(uniform(std::log(lo), std::log(hi)));
    }

    // Independent child stream (corpus -> per-stream seeds, etc.).
    static std::uint64_t child_seed(std::uint64_t seed, std::uint64_t stream_id) {
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream_id + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    Rng child(std::uint64_t stream_id) const {
        return Rng(child_seed(seed_base_, stream_id));
    }

    explicit Rng(std::uint64_t seed, bool) = delete;

private:
    std::mt19937_64 gen_;
    std::uint64_t seed_base_ = 0;

public:
    // Factory keeping the base seed for child derivation.
    static Rng seeded(std::uint64_t seed) {
        Rng r(seed);
        r.seed_base_ = seed;
        return r;
    }
};

}  // namespace streamloc
