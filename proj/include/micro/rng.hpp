#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>

namespace micro {

/// SplitMix64 finalizer; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Derives an independent stream key from a root seed and a path of
/// integers (stream tag, example index, ...). Streams for distinct paths
/// never share state, so work can be split across examples or threads and
/// still reproduce bit-for-bit.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) noexcept {
    std::uint64_t h = mix64(seed ^ 0x6a09e667f3bcc909ULL);
    for (auto p : path) {
        h = mix64(h ^ mix64(p + 0x9e3779b97f4a7c15ULL));
    }
    return h;
}

/// Counter-based generator: output n is mix64(key + n * golden). Satisfies
/// UniformRandomBitGenerator so it plugs into <random> distributions.
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t key) noexcept : key_(key) {}
    Rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path) noexcept : key_(derive_seed(seed, path)) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept {
        ++counter_;
        return mix64(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(*this);
    }

    bool bernoulli(double p) noexcept { return uniform() < p; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

// Stream tags used with derive_seed.
namespace stream {
inline constexpr std::uint64_t population = 1;
inline constexpr std::uint64_t prompt = 2;
inline constexpr std::uint64_t pair = 3;
inline constexpr std::uint64_t group = 4;
inline constexpr std::uint64_t label = 5;
inline constexpr std::uint64_t context = 6;
inline constexpr std::uint64_t init = 7;
inline constexpr std::uint64_t shuffle = 8;
inline constexpr std::uint64_t subsample = 9;
inline constexpr std::uint64_t grad_check = 10;
inline constexpr std::uint64_t restart = 11;
inline constexpr std::uint64_t heldout = 12;
} // namespace stream

} // namespace micro
