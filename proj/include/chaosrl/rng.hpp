// Deterministic RNG streams.
//
// A single top-level 64-bit seed deterministically derives independent
// per-episode / per-cell streams via splitmix64 mixing, so episode k of a
// batch draws the same numbers no matter which thread runs it or in which
// order.  All stochastic code in the library draws through RngStream only.
#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Core>

namespace chaosrl {

// splitmix64 step; good 64->64 mixer, used to decorrelate derived seeds.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Combine a root seed with a stream index (episode number, sweep cell, ...).
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
    return mix64(mix64(root) ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

class RngStream {
  public:
    explicit RngStream(std::uint64_t seed) : gen_(mix64(seed)) {}
    RngStream(std::uint64_t root, std::uint64_t stream) : gen_(derive_seed(root, stream)) {}

    // Uniform double in [0, 1).
    double u01() { return std::uniform_real_distribution<double>(0.0, 1.0)(gen_); }

    // Uniform integer in {0, ..., n-1}.
    int uniform_int(int n) { return std::uniform_int_distribution<int>(0, n - 1)(gen_); }

    // Standard normal draw.  The distribution object lives in the stream so
    // its internal pair cache never leaks across streams.
    double normal() { return normal_(gen_); }

    // Sample an index from an inclusive-prefix-sum (CDF) row.  The row's last
    // entry should be ~1; draws beyond it (rounding) clamp to the last index.
    int categorical_cdf(const Eigen::VectorXd& cdf) {
        const double u = u01();
        const int n = static_cast<int>(cdf.size());
        for (int i = 0; i < n; ++i)
            if (u < cdf[i]) return i;
        return n - 1;
    }

    // Sample from an unnormalised-free probability row (linear scan).
    int categorical(const Eigen::VectorXd& probs) {
        const double u = u01();
        double acc = 0.0;
        const int n = static_cast<int>(probs.size());
        for (int i = 0; i < n; ++i) {
            acc += probs[i];
            if (u < acc) return i;
        }
        return n - 1;
    }

    std::mt19937_64& engine() { return gen_; }

  private:
    std::mt19937_64 gen_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace chaosrl
