#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "micro/core_model.hpp"

namespace micro {

/// Hedge temperature presets.
inline constexpr double kTauHelpSteer2 = 1e-3;
inline constexpr double kTauRpr = 1e-4;

struct Stage2Config {
    double tau = kTauHelpSteer2;
    std::size_t budget_per_attribute = 50;
    std::size_t batch_size = 32;
    std::size_t epochs = 10;
    bool recompute_weights_once_per_epoch = true;
    double router_lr = 1e-3;
    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const Stage2Config&) const = default;
};

/// Soft labels omega_i and per-head losses L_{i,k} for a batch.
struct HedgeState {
    std::vector<std::vector<double>> omega;
    std::vector<std::vector<double>> per_head_loss;
};

/// L_k = -log sigma(r_k(winner) - r_k(loser)) for every head.
std::vector<double> per_head_losses(const MixtureModel& model, const PreferenceExample& ex);

/// Multiplicative-weights step omega_k exp(-L_k / tau), renormalised.
/// This is the exact minimiser over the simplex of
/// sum_k f_k L_k + tau * KL(f || omega).
std::vector<double> hedge_update(std::span<const double> omega, std::span<const double> losses, double tau);

/// Soft labels from the current router outputs for every example.
HedgeState compute_soft_labels(const MixtureModel& model, BatchView batch, double tau);

struct RouteScore {
    FeatureVector weights;
    double p_mix = 0.5;
    /// p_mix > 0.5, decided on the signed margin; an exact tie counts as wrong.
    bool predicts_winner = false;
};

RouteScore route_and_score(const MixtureModel& model, const PreferenceExample& ex);

/// Fraction of examples where route_and_score prefers the winner.
double routing_accuracy(const MixtureModel& model, BatchView batch);

/// Keeps at most `budget` examples per context_group, chosen uniformly at
/// random (seeded); survivors keep their corpus order.
std::vector<PreferenceExample> apply_budget(const std::vector<PreferenceExample>& corpus, std::size_t budget,
                                            std::uint64_t seed);

struct Stage2LogEntry {
    std::size_t epoch = 0;
    double mean_soft_label_entropy = 0.0;
    double router_ce = 0.0;
    /// NaN when no held-out set is given.
    double heldout_accuracy = 0.0;
};

struct Stage2Result {
    MixtureModel model;
    std::vector<Stage2LogEntry> log;
};

/// Context-aware router learning with frozen heads: each round turns the
/// current router outputs into Hedge soft labels and fits the router to
/// them by cross-entropy with AdamW. Every example must carry a
/// context_group and no group may exceed config.budget_per_attribute.
Stage2Result run_algorithm1(const MixtureModel& model, const std::vector<PreferenceExample>& context_corpus,
                            const Stage2Config& config, const std::vector<PreferenceExample>* heldout = nullptr);

} // namespace micro
