#pragma once

#include <cstdint>
#include <vector>

#include "micro/core_model.hpp"
#include "micro/rng.hpp"
#include "micro/stage1.hpp"

namespace micro::testing {

inline FeatureVector random_vector(Rng& rng, std::size_t n, double sd = 1.0) {
    FeatureVector v(n);
    for (auto& x : v) x = rng.normal(0.0, sd);
    return v;
}

// Model with non-trivial router weights so every code path is exercised.
inline MixtureModel random_model(std::size_t k, std::size_t pair_dim, std::size_t ctx_dim, std::size_t hidden, std::uint64_t seed,
                                 double head_sd = 0.7, double router_sd = 0.5) {
    Rng rng(seed, {99});
    MixtureModel m;
    for (std::size_t c = 0; c < k; ++c) m.heads.push_back({random_vector(rng, pair_dim, head_sd), rng.normal(0.0, 0.3)});
    m.router = RouterParams::zeros(ctx_dim, hidden, k);
    for (auto& w : m.router.hidden_weights.data) w = rng.normal(0.0, router_sd);
    for (auto& w : m.router.hidden_bias) w = rng.normal(0.0, router_sd);
    for (auto& w : m.router.output_weights.data) w = rng.normal(0.0, router_sd);
    for (auto& w : m.router.output_bias) w = rng.normal(0.0, router_sd);
    return m;
}

inline std::vector<PreferenceExample> random_batch(std::size_t n, std::size_t pair_dim, std::size_t ctx_dim, std::uint64_t seed) {
    Rng rng(seed, {98});
    std::vector<PreferenceExample> out(n);
    for (auto& ex : out) {
        ex.prompt_ctx = random_vector(rng, ctx_dim);
        ex.winner = random_vector(rng, pair_dim);
        ex.loser = random_vector(rng, pair_dim);
    }
    return out;
}

}  // namespace micro::testing
