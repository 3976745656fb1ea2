#pragma once

#include <cstdint>
#include <vector>

namespace prm {

/// SplitMix64 step; also used as a mixing finalizer for derived seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// xoshiro256++ seeded via SplitMix64.
///
/// The std:: distributions are implementation-defined, so every draw in the
/// library goes through this class to keep seeded runs byte-reproducible.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next();

    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi);

    /// Standard normal via Box-Muller (cached spare).
    double normal();

    /// Uniform integer in [lo, hi], both inclusive.
    int uniform_int(int lo, int hi);

    bool bernoulli(double p);

    /// Independent child stream derived from the original seed and a tag.
    /// Unaffected by how many draws the parent has made.
    Rng fork(std::uint64_t tag) const;

    /// Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& values) {
        for (int i = static_cast<int>(values.size()) - 1; i > 0; --i) {
            int j = uniform_int(0, i);
            std::swap(values[static_cast<std::size_t>(i)],
                      values[static_cast<std::size_t>(j)]);
        }
    }

private:
    std::uint64_t seed_;
    std::uint64_t s_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Stateless counter-based uniform value in [0, 1). The result depends only
/// on (seed, layer, step, index), never on evaluation order, which makes
/// dropout bit-reproducible regardless of how forward passes interleave.
double counter_uniform(std::uint64_t seed, std::uint64_t layer,
                       std::uint64_t step, std::uint64_t index);

}  // namespace prm
