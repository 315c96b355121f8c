#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "micro/core_model.hpp"

namespace micro {

/// Linear softmax gate gamma(x) = softmax(W x + b), floored at rho.
struct GatingMap {
    Matrix weights;      // K x prompt_dim
    FeatureVector bias;  // K

    bool operator==(const GatingMap&) const = default;
};

/// Candidate-pair distribution: the first candidate is drawn from
/// N(shift, scale^2 I), the second from N(0, scale^2 I). A zero shift
/// makes the pair exchangeable.
struct PairSampler {
    std::size_t dim = 0;
    double scale = 1.0;
    FeatureVector shift;

    bool operator==(const PairSampler&) const = default;
};

/// Planted heterogeneous-annotator population.
struct PopulationSpec {
    std::size_t k = 0;
    std::size_t prompt_dim = 0;
    std::vector<RewardHead> true_heads;
    GatingMap gating;
    double rho = 0.0;
    PairSampler pair_sampler;
    /// When set, router inputs carry K extra context slots after the prompt
    /// features (zeros when no context is observed).
    bool context_slots = false;
    /// Probability that an observed context points at a wrong group.
    double context_noise = 0.0;
    /// Value written into the observed group's context slot.
    double context_scale = 1.0;
    std::uint64_t seed = 0;

    std::size_t pair_dim() const { return pair_sampler.dim; }
    std::size_t router_input_dim() const { return prompt_dim + (context_slots ? k : 0); }

    /// Throws invalid_argument / dimension_mismatch for inconsistent specs,
    /// including rho * K > 1.
    void validate() const;

    bool operator==(const PopulationSpec&) const = default;
};

/// Knobs for drawing a random planted population from a seed.
struct PopulationParams {
    std::size_t k = 2;
    std::size_t prompt_dim = 8;
    std::size_t pair_dim = 8;
    double rho = 0.1;
    /// Norm of each true head's weight vector.
    double head_norm = 3.0;
    /// Std of the gating map entries; larger makes gamma(x) sharper.
    double gating_scale = 2.0;
    /// Norm of the candidate mean shift (0 keeps pairs exchangeable).
    double shift_norm = 0.0;
    double pair_scale = 1.0;
    bool context_slots = false;
    double context_noise = 0.0;
    double context_scale = 1.0;
    std::uint64_t seed = 0;

    bool operator==(const PopulationParams&) const = default;
};

PopulationSpec make_population(const PopulationParams& params);

/// Floored, renormalised mixing weights gamma(x); every entry >= rho.
FeatureVector group_weights(const PopulationSpec& spec, std::span<const double> prompt);

enum class ContextMode {
    blank,  // context slots (if any) left at zero
    group,  // one-hot of the (possibly noise-flipped) group id
};

struct SampleOptions {
    ContextMode context = ContextMode::blank;
    /// Distinguishes independent corpora drawn from the same population.
    std::uint64_t stream = 0;
};

/// The two candidates for example `index`, before label orientation.
struct CandidatePair {
    FeatureVector first;
    FeatureVector second;
};

FeatureVector draw_prompt(const PopulationSpec& spec, std::uint64_t stream, std::size_t index);
CandidatePair draw_candidates(const PopulationSpec& spec, std::uint64_t stream, std::size_t index, std::size_t pair = 0);
int draw_group(const PopulationSpec& spec, std::uint64_t stream, std::size_t index, std::span<const double> gamma);
/// Uniform draw deciding the label of example `index`: the first candidate
/// wins iff u < sigma(s_z(first, second)).
double label_uniform(const PopulationSpec& spec, std::uint64_t stream, std::size_t index);

/// Draws n labelled comparisons. Example i depends only on (seed, stream, i).
std::vector<PreferenceExample> sample_corpus(const PopulationSpec& spec, std::size_t n, SampleOptions options = {});

/// Attribute / context-group tag used for planted groups.
std::string group_tag(int group);

/// log P(first > second) and log P(second > first) for a predictor.
struct LogProbPair {
    double log_first = 0.0;
    double log_second = 0.0;
};

using LogPredictor =
    std::function<LogProbPair(std::span<const double> router_input, std::span<const double> first, std::span<const double> second)>;

LogPredictor predictor_for(const MixtureModel& model);
/// The true mixture sum_k gamma_k(x) sigma(s*_k).
LogPredictor predictor_for(const PopulationSpec& spec);

struct McEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    std::size_t samples = 0;
};

struct MonteCarloOptions {
    std::size_t pairs_per_prompt = 1;
    std::uint64_t stream = 0xC0FFEEULL;
};

/// Population cross-entropy of `predictor` under the true mixture. The
/// latent group is marginalised exactly (sum_k gamma_k), prompts and pairs
/// are sampled. Draws are shared with bound_estimate for equal options.
McEstimate oracle_population_ce(const PopulationSpec& spec, const LogPredictor& predictor, std::size_t m,
                                MonteCarloOptions options = {});
McEstimate oracle_population_ce(const PopulationSpec& spec, const MixtureModel& model, std::size_t m,
                                MonteCarloOptions options = {});

/// Router input for a prompt with blank context slots.
FeatureVector blank_router_input(const PopulationSpec& spec, std::span<const double> prompt);

/// An item of an attribute-rated corpus.
struct RatedItem {
    FeatureVector prompt_ctx;
    FeatureVector response;
    std::map<std::string, long long> ratings;
};

/// Turns absolute ratings into pairwise comparisons per attribute; ties
/// are skipped, and with `exclude_unanimous` pairs whose non-tied
/// attributes all point the same way are dropped.
std::vector<PreferenceExample> binarize_rated_corpus(std::span<const RatedItem> items,
                                                     std::span<const std::string> attribute_set,
                                                     bool exclude_unanimous);

} // namespace micro
