#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "micro/core_model.hpp"
#include "micro/population.hpp"
#include "micro/stage1.hpp"
#include "micro/stage2.hpp"

namespace micro {

/// Tag used for examples without an attribute.
inline const std::string kDefaultAttribute = "all";

struct EvalReport {
    /// Attribute names in sorted order; indexes the columns of per_head_accuracy.
    std::vector<std::string> attributes;
    std::map<std::string, double> per_attribute_accuracy;
    std::map<std::string, std::size_t> attribute_counts;
    /// per_head_accuracy[k][a]: head k alone as a BT model on attribute a.
    std::vector<std::vector<double>> per_head_accuracy;
    std::map<std::string, std::size_t> best_head_per_attribute;
    /// Unweighted mean over attributes.
    double average_accuracy = 0.0;
    double ce_loss = 0.0;
    std::size_t n_examples = 0;
};

/// Mixture accuracy (ties count as wrong), per-head accuracy and
/// cross-entropy, grouped by attribute tag.
EvalReport evaluate(const MixtureModel& model, const std::vector<PreferenceExample>& corpus);

struct BoundReport {
    double rho = 0.0;
    double variance_term = 0.0;
    double entropy_term = 0.0;
    double bound = 0.0;
    double mc_std_error = 0.0;
    std::size_t mc_prompts = 0;
    std::size_t pairs_per_prompt = 0;
    /// Filled by verify_irreducibility; NaN otherwise.
    double single_bt_ce = std::numeric_limits<double>::quiet_NaN();
    double single_bt_std_error = 0.0;
    bool satisfied = false;
    /// Optional population CE of a K-component mixture trained on the same spec.
    std::optional<double> mixture_ce;
};

struct BoundOptions {
    /// Pairs drawn per prompt for the per-prompt win-probability means;
    /// at least 2 for the unbiased variance correction.
    std::size_t pairs_per_prompt = 8;
    std::uint64_t stream = 0xB0D;
};

/// Monte Carlo estimate of the single-BT cross-entropy lower bound
/// 2 rho K E_x Var_k[pbar_k(x)] + E_x sum_k gamma_k(x) E_pairs H_b(sigma_k),
/// where pbar_k(x) is group k's mean win-probability of the first candidate.
BoundReport bound_estimate(const PopulationSpec& spec, std::size_t m, BoundOptions options = {});

struct IrreducibilityBudget {
    std::size_t train_examples = 20000;
    std::size_t selection_examples = 5000;
    std::size_t restarts = 3;
    /// k is forced to 1.
    Stage1Config trainer = [] {
        Stage1Config c;
        c.k = 1;
        c.hidden_size = 1;
        c.alpha = 0.0;
        c.learning_rate = 2e-2;
        c.batch_size = 32;
        c.grad_accum_steps = 1;
        c.epochs = 4;
        return c;
    }();
};

/// Trains single-BT models (best of `restarts`), measures their population
/// CE on the bound's Monte Carlo draws, and checks CE >= bound - 3 SE.
BoundReport verify_irreducibility(const PopulationSpec& spec, std::size_t m, const IrreducibilityBudget& budget = {},
                                  BoundOptions options = {});

struct HeadMatch {
    /// permutation[k] = learned head matched to true head k.
    std::vector<std::size_t> permutation;
    /// Fraction of sampled pairs where the matched heads order them alike.
    std::vector<double> agreement;
    double min_agreement = 0.0;
};

/// Best assignment of learned heads to the population's true heads by
/// pairwise-preference agreement on pairs drawn from the pair sampler.
HeadMatch match_heads(const MixtureModel& model, const PopulationSpec& spec, std::size_t n_pairs,
                      std::uint64_t stream = 0xA11);

/// Expected accuracy of the Bayes predictor on `corpus`:
/// mean of max(p, 1 - p) with p = sigma(s*_z) when the group is known
/// (uses group_id), otherwise the true mixture probability.
double bayes_accuracy(const PopulationSpec& spec, const std::vector<PreferenceExample>& corpus, bool group_known);

struct BudgetPoint {
    std::size_t budget = 0;
    double mean_accuracy = 0.0;
    double std_accuracy = 0.0;
    std::vector<double> runs;
};

/// Router adaptation from the same Stage-1 model at each budget (per
/// context group), `repeats` fresh subsamples each, scored by macro
/// accuracy on `heldout`. Budget 0 means no adaptation.
std::vector<BudgetPoint> budget_sweep(const MixtureModel& model, const std::vector<PreferenceExample>& context_pool,
                                      const std::vector<PreferenceExample>& heldout, std::span<const std::size_t> budgets,
                                      const Stage2Config& config, std::size_t repeats = 5);

} // namespace micro
