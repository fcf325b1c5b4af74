#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "moeforge/error.hpp"

namespace moeforge {

/// Deterministic random stream.
///
/// The 256-bit state is filled by four successive splitmix64 outputs of the
/// seed and advanced with xoshiro256** (Blackman & Vigna). Every derived
/// draw (uniform, index, normal) is defined here so streams are bit-exact
/// across platforms and standard libraries:
///
///   uniform()        = (next() >> 11) * 2^-53                in [0, 1)
///   uniform_index(n) = rejection-sampled next() % n          unbiased
///   normal()         = Box-Muller cos branch, u1 in (0, 1]   one draw pair per call
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed = 0) noexcept : seed_(seed)
    {
        std::uint64_t sm = seed;
        for (auto& word : state_)
            word = splitmix64(sm);
    }

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return ~result_type{0}; }

    std::uint64_t seed() const noexcept { return seed_; }

    result_type next() noexcept
    {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    result_type operator()() noexcept { return next(); }

    double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    std::uint64_t uniform_index(std::uint64_t n)
    {
        if (n == 0)
            throw InvalidArgument("uniform_index: empty range");
        const std::uint64_t limit = max() - max() % n;
        std::uint64_t r = next();
        while (r >= limit)
            r = next();
        return r % n;
    }

    double normal() noexcept
    {
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

    /// Independent child stream; used to give each token its own noise source.
    Rng split() noexcept { return Rng(next()); }

    static std::uint64_t splitmix64(std::uint64_t& x) noexcept
    {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept
    {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t seed_;
    std::array<std::uint64_t, 4> state_{};
};

} // namespace moeforge
