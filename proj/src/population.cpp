#include "micro/population.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "micro/error.hpp"
#include "micro/parallel.hpp"
#include "micro/rng.hpp"

namespace micro {

namespace {

constexpr std::size_t kMcChunk = 512;

FeatureVector random_direction(Rng& rng, std::size_t dim, double norm) {
    FeatureVector v(dim);
    double n2 = 0.0;
    for (auto& x : v) {
        x = rng.normal();
        n2 += x * x;
    }
    const double scale = n2 > 0.0 ? norm / std::sqrt(n2) : 0.0;
    for (auto& x : v) x *= scale;
    return v;
}

double score(const RewardHead& head, std::span<const double> first, std::span<const double> second) {
    return head_reward(head, first) - head_reward(head, second);
}

double log_sum_exp(std::span<const double> v) {
    double hi = -std::numeric_limits<double>::infinity();
    for (double x : v) hi = std::max(hi, x);
    if (!std::isfinite(hi)) return hi;
    double s = 0.0;
    for (double x : v) s += std::exp(x - hi);
    return hi + std::log(s);
}

struct Moments {
    double sum = 0.0;
    double sum_sq = 0.0;
};

McEstimate finish(const std::vector<Moments>& parts, std::size_t m) {
    double s = 0.0, s2 = 0.0;
    for (const auto& p : parts) {
        s += p.sum;
        s2 += p.sum_sq;
    }
    McEstimate est;
    est.samples = m;
    est.mean = s / static_cast<double>(m);
    if (m > 1) {
        const double var = std::max(0.0, (s2 - s * est.mean) / static_cast<double>(m - 1));
        est.std_error = std::sqrt(var / static_cast<double>(m));
    }
    return est;
}

} // namespace

void PopulationSpec::validate() const {
    if (k == 0) throw Error(ErrorCode::invalid_argument, "population: k must be positive");
    if (!(rho > 0.0)) throw Error(ErrorCode::invalid_argument, "population: rho must be > 0");
    if (rho * static_cast<double>(k) > 1.0 + 1e-12) {
        std::ostringstream msg;
        msg << "population: rho * K = " << rho * static_cast<double>(k) << " exceeds 1";
        throw Error(ErrorCode::invalid_argument, msg.str());
    }
    if (!(context_noise >= 0.0 && context_noise <= 1.0)) {
        throw Error(ErrorCode::invalid_argument, "population: context_noise must lie in [0, 1]");
    }
    if (!(context_scale > 0.0) || !std::isfinite(context_scale)) {
        throw Error(ErrorCode::invalid_argument, "population: context_scale must be finite and > 0");
    }
    if (!(pair_sampler.scale >= 0.0)) throw Error(ErrorCode::invalid_argument, "population: pair scale must be >= 0");
    require_dim("population true_heads", k, true_heads.size());
    for (const auto& h : true_heads) require_dim("population head weights", pair_sampler.dim, h.weights.size());
    require_dim("population pair shift", pair_sampler.dim, pair_sampler.shift.size());
    require_dim("population gating rows", k, gating.weights.rows);
    require_dim("population gating cols", prompt_dim, gating.weights.cols);
    require_dim("population gating storage", k * prompt_dim, gating.weights.data.size());
    require_dim("population gating bias", k, gating.bias.size());
}

PopulationSpec make_population(const PopulationParams& params) {
    PopulationSpec spec;
    spec.k = params.k;
    spec.prompt_dim = params.prompt_dim;
    spec.rho = params.rho;
    spec.context_slots = params.context_slots;
    spec.context_noise = params.context_noise;
    spec.context_scale = params.context_scale;
    spec.seed = params.seed;
    spec.pair_sampler.dim = params.pair_dim;
    spec.pair_sampler.scale = params.pair_scale;

    Rng rng(params.seed, {stream::population});
    for (std::size_t k = 0; k < params.k; ++k) {
        spec.true_heads.push_back({random_direction(rng, params.pair_dim, params.head_norm), 0.0});
    }
    spec.gating.weights = Matrix(params.k, params.prompt_dim);
    const double gate_std = params.prompt_dim > 0 ? params.gating_scale / std::sqrt(static_cast<double>(params.prompt_dim)) : 0.0;
    for (auto& w : spec.gating.weights.data) w = rng.normal(0.0, gate_std);
    spec.gating.bias.assign(params.k, 0.0);
    spec.pair_sampler.shift = random_direction(rng, params.pair_dim, params.shift_norm);
    spec.validate();
    return spec;
}

FeatureVector group_weights(const PopulationSpec& spec, std::span<const double> prompt) {
    require_dim("prompt features", spec.prompt_dim, prompt.size());
    const std::size_t k = spec.k;
    std::vector<double> logits(k);
    for (std::size_t c = 0; c < k; ++c) {
        double s = spec.gating.bias[c];
        const auto row = spec.gating.weights.row(c);
        for (std::size_t i = 0; i < prompt.size(); ++i) s += row[i] * prompt[i];
        logits[c] = s;
    }
    const double lse = log_sum_exp(logits);
    FeatureVector gamma(k);
    for (std::size_t c = 0; c < k; ++c) gamma[c] = std::exp(logits[c] - lse);

    // Raise entries below rho to rho and take the deficit proportionally
    // from the entries above it; repeat until no entry falls under the floor.
    std::vector<bool> fixed(k, false);
    for (std::size_t round = 0; round < k; ++round) {
        double fixed_mass = 0.0, free_mass = 0.0;
        bool changed = false;
        for (std::size_t c = 0; c < k; ++c) {
            if (!fixed[c] && gamma[c] < spec.rho) {
                fixed[c] = true;
                changed = true;
            }
        }
        if (!changed) break;
        for (std::size_t c = 0; c < k; ++c) {
            if (fixed[c]) fixed_mass += spec.rho;
            else free_mass += gamma[c];
        }
        const double remaining = 1.0 - fixed_mass;
        for (std::size_t c = 0; c < k; ++c) {
            if (fixed[c]) gamma[c] = spec.rho;
            else gamma[c] = free_mass > 0.0 ? gamma[c] * remaining / free_mass : remaining;
        }
    }
    return gamma;
}

FeatureVector draw_prompt(const PopulationSpec& spec, std::uint64_t stream_id, std::size_t index) {
    Rng rng(spec.seed, {stream::prompt, stream_id, index});
    FeatureVector x(spec.prompt_dim);
    for (auto& v : x) v = rng.normal();
    return x;
}

CandidatePair draw_candidates(const PopulationSpec& spec, std::uint64_t stream_id, std::size_t index, std::size_t pair) {
    Rng rng(spec.seed, {stream::pair, stream_id, index, pair});
    const auto& ps = spec.pair_sampler;
    CandidatePair c{FeatureVector(ps.dim), FeatureVector(ps.dim)};
    for (std::size_t i = 0; i < ps.dim; ++i) c.first[i] = ps.shift[i] + ps.scale * rng.normal();
    for (std::size_t i = 0; i < ps.dim; ++i) c.second[i] = ps.scale * rng.normal();
    return c;
}

int draw_group(const PopulationSpec& spec, std::uint64_t stream_id, std::size_t index, std::span<const double> gamma) {
    Rng rng(spec.seed, {stream::group, stream_id, index});
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t k = 0; k + 1 < gamma.size(); ++k) {
        acc += gamma[k];
        if (u < acc) return static_cast<int>(k);
    }
    return static_cast<int>(gamma.size()) - 1;
}

double label_uniform(const PopulationSpec& spec, std::uint64_t stream_id, std::size_t index) {
    return Rng(spec.seed, {stream::label, stream_id, index}).uniform();
}

std::string group_tag(int group) { return "group" + std::to_string(group); }

std::vector<PreferenceExample> sample_corpus(const PopulationSpec& spec, std::size_t n, SampleOptions options) {
    spec.validate();
    if (n == 0) throw Error(ErrorCode::invalid_argument, "sample_corpus: n must be >= 1");
    if (options.context == ContextMode::group && !spec.context_slots) {
        throw Error(ErrorCode::invalid_argument, "sample_corpus: group context requested but the population has no context slots");
    }

    std::vector<PreferenceExample> out(n);
    map_chunks<int>(n, 256, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            const auto prompt = draw_prompt(spec, options.stream, i);
            const auto gamma = group_weights(spec, prompt);
            const int z = draw_group(spec, options.stream, i, gamma);
            auto cand = draw_candidates(spec, options.stream, i);
            const double p = bt_probability(score(spec.true_heads[z], cand.first, cand.second));
            const bool keep = label_uniform(spec, options.stream, i) < p;

            PreferenceExample& ex = out[i];
            ex.prompt_ctx = prompt;
            if (spec.context_slots) {
                ex.prompt_ctx.resize(spec.prompt_dim + spec.k, 0.0);
                if (options.context == ContextMode::group) {
                    int observed = z;
                    Rng rng(spec.seed, {stream::context, options.stream, i});
                    if (spec.k > 1 && rng.bernoulli(spec.context_noise)) {
                        // uniform over the other groups
                        const auto shift = 1 + static_cast<int>(rng() % (spec.k - 1));
                        observed = (z + shift) % static_cast<int>(spec.k);
                    }
                    ex.prompt_ctx[spec.prompt_dim + observed] = spec.context_scale;
                    ex.context_group = group_tag(observed);
                }
            }
            ex.winner = keep ? std::move(cand.first) : std::move(cand.second);
            ex.loser = keep ? std::move(cand.second) : std::move(cand.first);
            ex.group_id = z;
            ex.attribute = group_tag(z);
        }
        return 0;
    });
    return out;
}

FeatureVector blank_router_input(const PopulationSpec& spec, std::span<const double> prompt) {
    FeatureVector x(prompt.begin(), prompt.end());
    x.resize(spec.router_input_dim(), 0.0);
    return x;
}

LogPredictor predictor_for(const MixtureModel& model) {
    return [&model](std::span<const double> input, std::span<const double> first, std::span<const double> second) {
        const auto pass = router_pass(model.router, input);
        std::vector<double> fwd(model.k()), bwd(model.k());
        for (std::size_t k = 0; k < model.k(); ++k) {
            const double s = score(model.heads[k], first, second);
            fwd[k] = pass.log_weights[k] + log_bt_probability(s);
            bwd[k] = pass.log_weights[k] + log_bt_probability(-s);
        }
        return LogProbPair{log_sum_exp(fwd), log_sum_exp(bwd)};
    };
}

LogPredictor predictor_for(const PopulationSpec& spec) {
    return [&spec](std::span<const double> input, std::span<const double> first, std::span<const double> second) {
        const auto gamma = group_weights(spec, input.first(spec.prompt_dim));
        std::vector<double> fwd(spec.k), bwd(spec.k);
        for (std::size_t k = 0; k < spec.k; ++k) {
            const double s = score(spec.true_heads[k], first, second);
            fwd[k] = std::log(gamma[k]) + log_bt_probability(s);
            bwd[k] = std::log(gamma[k]) + log_bt_probability(-s);
        }
        return LogProbPair{log_sum_exp(fwd), log_sum_exp(bwd)};
    };
}

McEstimate oracle_population_ce(const PopulationSpec& spec, const LogPredictor& predictor, std::size_t m,
                                MonteCarloOptions options) {
    spec.validate();
    if (m == 0) throw Error(ErrorCode::invalid_argument, "oracle_population_ce: m must be >= 1");
    const std::size_t pairs = std::max<std::size_t>(options.pairs_per_prompt, 1);
    auto parts = map_chunks<Moments>(m, kMcChunk, [&](std::size_t b, std::size_t e) {
        Moments mom;
        for (std::size_t i = b; i < e; ++i) {
            const auto prompt = draw_prompt(spec, options.stream, i);
            const auto gamma = group_weights(spec, prompt);
            const auto input = blank_router_input(spec, prompt);
            double value = 0.0;
            for (std::size_t j = 0; j < pairs; ++j) {
                const auto cand = draw_candidates(spec, options.stream, i, j);
                const auto lp = predictor(input, cand.first, cand.second);
                for (std::size_t k = 0; k < spec.k; ++k) {
                    const double sk = bt_probability(score(spec.true_heads[k], cand.first, cand.second));
                    value -= gamma[k] * (sk * lp.log_first + (1.0 - sk) * lp.log_second);
                }
            }
            value /= static_cast<double>(pairs);
            mom.sum += value;
            mom.sum_sq += value * value;
        }
        return mom;
    });
    return finish(parts, m);
}

McEstimate oracle_population_ce(const PopulationSpec& spec, const MixtureModel& model, std::size_t m,
                                MonteCarloOptions options) {
    model.validate();
    require_dim("model router input vs population", spec.router_input_dim(), model.router_input_dim());
    require_dim("model pair features vs population", spec.pair_dim(), model.pair_dim());
    return oracle_population_ce(spec, predictor_for(model), m, options);
}

std::vector<PreferenceExample> binarize_rated_corpus(std::span<const RatedItem> items,
                                                     std::span<const std::string> attribute_set,
                                                     bool exclude_unanimous) {
    if (attribute_set.empty()) {
        throw Error(ErrorCode::invalid_argument, "binarize_rated_corpus: attribute_set is empty");
    }
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].ratings.empty()) {
            throw Error(ErrorCode::invalid_argument, "binarize_rated_corpus: item has no ratings", i);
        }
    }

    // Prompt groups in order of first appearance.
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < items.size(); ++i) {
        auto it = std::find_if(groups.begin(), groups.end(),
                               [&](const auto& g) { return items[g.front()].prompt_ctx == items[i].prompt_ctx; });
        if (it == groups.end()) groups.push_back({i});
        else it->push_back(i);
    }

    std::vector<PreferenceExample> out;
    for (const auto& group : groups) {
        for (std::size_t a = 0; a < group.size(); ++a) {
            for (std::size_t b = a + 1; b < group.size(); ++b) {
                const RatedItem& first = items[group[a]];
                const RatedItem& second = items[group[b]];
                // +1: first preferred, -1: second preferred, 0: tie or unrated
                std::vector<int> direction(attribute_set.size(), 0);
                for (std::size_t t = 0; t < attribute_set.size(); ++t) {
                    auto ra = first.ratings.find(attribute_set[t]);
                    auto rb = second.ratings.find(attribute_set[t]);
                    if (ra == first.ratings.end() || rb == second.ratings.end()) continue;
                    direction[t] = (ra->second > rb->second) - (ra->second < rb->second);
                }
                if (exclude_unanimous) {
                    const bool any_first = std::find(direction.begin(), direction.end(), 1) != direction.end();
                    const bool any_second = std::find(direction.begin(), direction.end(), -1) != direction.end();
                    if (any_first != any_second) continue;
                }
                for (std::size_t t = 0; t < attribute_set.size(); ++t) {
                    if (direction[t] == 0) continue;
                    const RatedItem& w = direction[t] > 0 ? first : second;
                    const RatedItem& l = direction[t] > 0 ? second : first;
                    PreferenceExample ex;
                    ex.prompt_ctx = first.prompt_ctx;
                    ex.winner = w.response;
                    ex.loser = l.response;
                    ex.attribute = attribute_set[t];
                    ex.context_group = attribute_set[t];
                    out.push_back(std::move(ex));
                }
            }
        }
    }
    return out;
}

} // namespace micro
