#include "prm/rng.hpp"

#include <cmath>

#include "prm/errors.hpp"

namespace prm {

namespace {

inline std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

inline double to_unit_double(std::uint64_t bits) {
    // 53 high bits -> [0, 1)
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& word : s_) {
        word = splitmix64(sm);
    }
}

std::uint64_t Rng::next() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() { return to_unit_double(next()); }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) {
        u1 = uniform();
    }
    const double mag = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * M_PI * u2;
    spare_ = mag * std::sin(angle);
    has_spare_ = true;
    return mag * std::cos(angle);
}

int Rng::uniform_int(int lo, int hi) {
    if (hi < lo) {
        throw ConfigError("uniform_int: empty range");
    }
    const std::uint64_t span = static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1;
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t draw = next();
    while (draw >= limit) {
        draw = next();
    }
    return lo + static_cast<int>(draw % span);
}

bool Rng::bernoulli(double p) { return uniform() < p; }

Rng Rng::fork(std::uint64_t tag) const {
    std::uint64_t sm = seed_ ^ 0x6a09e667f3bcc909ull;
    std::uint64_t mixed = splitmix64(sm) ^ tag;
    return Rng(splitmix64(mixed));
}

double counter_uniform(std::uint64_t seed, std::uint64_t layer,
                       std::uint64_t step, std::uint64_t index) {
    std::uint64_t sm = seed;
    std::uint64_t h = splitmix64(sm);
    sm = h ^ (layer * 0xff51afd7ed558ccdull);
    h = splitmix64(sm);
    sm = h ^ (step * 0xc4ceb9fe1a85ec53ull);
    h = splitmix64(sm);
    sm = h ^ index;
    return static_cast<double>(splitmix64(sm) >> 11) * 0x1.0p-53;
}

}  // namespace prm
