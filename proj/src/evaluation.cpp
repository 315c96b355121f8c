#include "micro/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "micro/error.hpp"
#include "micro/parallel.hpp"
#include "micro/rng.hpp"

namespace micro {

namespace {

double score(const RewardHead& head, std::span<const double> first, std::span<const double> second) {
    return head_reward(head, first) - head_reward(head, second);
}

// Entropy of Bernoulli(sigma(s)), stable for large |s|.
double binary_entropy_of_logit(double s) {
    return -bt_probability(s) * log_bt_probability(s) - bt_probability(-s) * log_bt_probability(-s);
}

struct BoundParts {
    double variance = 0.0;
    double entropy = 0.0;
    double total = 0.0;
    double total_sq = 0.0;
};

} // namespace

EvalReport evaluate(const MixtureModel& model, const std::vector<PreferenceExample>& corpus) {
    if (corpus.empty()) throw Error(ErrorCode::empty_input, "evaluate: corpus is empty");
    model.validate();
    const std::size_t k = model.k();

    struct Tally {
        std::size_t n = 0;
        std::size_t mixture_correct = 0;
        std::vector<std::size_t> head_correct;
    };
    std::map<std::string, Tally> tallies;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& ex = corpus[i];
        const std::string& tag = ex.attribute ? *ex.attribute : kDefaultAttribute;
        auto& t = tallies[tag];
        if (t.head_correct.empty()) t.head_correct.assign(k, 0);
        ++t.n;
        if (route_and_score(model, ex).predicts_winner) ++t.mixture_correct;
        for (std::size_t c = 0; c < k; ++c) {
            if (head_delta(model.heads[c], ex) > 0.0) ++t.head_correct[c];
        }
    }

    EvalReport report;
    report.n_examples = corpus.size();
    report.per_head_accuracy.assign(k, {});
    double sum = 0.0;
    for (const auto& [tag, t] : tallies) {
        report.attributes.push_back(tag);
        report.attribute_counts[tag] = t.n;
        const double acc = static_cast<double>(t.mixture_correct) / static_cast<double>(t.n);
        report.per_attribute_accuracy[tag] = acc;
        sum += acc;
        std::size_t best = 0;
        for (std::size_t c = 0; c < k; ++c) {
            report.per_head_accuracy[c].push_back(static_cast<double>(t.head_correct[c]) / static_cast<double>(t.n));
            if (t.head_correct[c] > t.head_correct[best]) best = c;
        }
        report.best_head_per_attribute[tag] = best;
    }
    report.average_accuracy = sum / static_cast<double>(tallies.size());
    report.ce_loss = mle_loss(model, corpus);
    return report;
}

BoundReport bound_estimate(const PopulationSpec& spec, std::size_t m, BoundOptions options) {
    spec.validate();
    if (m == 0) throw Error(ErrorCode::invalid_argument, "bound_estimate: m must be >= 1");
    const std::size_t pairs = std::max<std::size_t>(options.pairs_per_prompt, 1);
    const std::size_t k = spec.k;
    const double kd = static_cast<double>(k);
    const double scale = 2.0 * spec.rho * kd;

    auto parts = map_chunks<BoundParts>(m, 512, [&](std::size_t b, std::size_t e) {
        BoundParts acc;
        std::vector<double> y(pairs * k);
        std::vector<double> mean(k);
        for (std::size_t i = b; i < e; ++i) {
            const auto prompt = draw_prompt(spec, options.stream, i);
            const auto gamma = group_weights(spec, prompt);
            double h = 0.0;
            std::fill(mean.begin(), mean.end(), 0.0);
            for (std::size_t j = 0; j < pairs; ++j) {
                const auto cand = draw_candidates(spec, options.stream, i, j);
                for (std::size_t c = 0; c < k; ++c) {
                    const double s = score(spec.true_heads[c], cand.first, cand.second);
                    y[j * k + c] = bt_probability(s);
                    mean[c] += y[j * k + c];
                    h += gamma[c] * binary_entropy_of_logit(s);
                }
            }
            h /= static_cast<double>(pairs);
            for (auto& v : mean) v /= static_cast<double>(pairs);

            // Plug-in variance over groups of the estimated means, minus the
            // part contributed by pair sampling noise (unbiased for P >= 2).
            const double grand = std::accumulate(mean.begin(), mean.end(), 0.0) / kd;
            double plug_in = 0.0;
            for (double v : mean) plug_in += (v - grand) * (v - grand);
            plug_in /= kd;
            double noise = 0.0;
            if (pairs > 1) {
                for (std::size_t j = 0; j < pairs; ++j) {
                    double row_mean = 0.0;
                    for (std::size_t c = 0; c < k; ++c) row_mean += y[j * k + c] - mean[c];
                    row_mean /= kd;
                    for (std::size_t c = 0; c < k; ++c) {
                        const double d = (y[j * k + c] - mean[c]) - row_mean;
                        noise += d * d;
                    }
                }
                noise /= static_cast<double>(pairs - 1) * static_cast<double>(pairs) * kd;
            }
            const double variance = scale * (plug_in - noise);
            acc.variance += variance;
            acc.entropy += h;
            acc.total += variance + h;
            acc.total_sq += (variance + h) * (variance + h);
        }
        return acc;
    });

    BoundParts sum;
    for (const auto& p : parts) {
        sum.variance += p.variance;
        sum.entropy += p.entropy;
        sum.total += p.total;
        sum.total_sq += p.total_sq;
    }
    const double md = static_cast<double>(m);
    BoundReport report;
    report.rho = spec.rho;
    report.mc_prompts = m;
    report.pairs_per_prompt = pairs;
    report.variance_term = std::max(0.0, sum.variance / md);
    report.entropy_term = sum.entropy / md;
    report.bound = report.variance_term + report.entropy_term;
    if (m > 1) {
        const double mean = sum.total / md;
        const double var = std::max(0.0, (sum.total_sq - sum.total * mean) / (md - 1.0));
        report.mc_std_error = std::sqrt(var / md);
    }
    return report;
}

BoundReport verify_irreducibility(const PopulationSpec& spec, std::size_t m, const IrreducibilityBudget& budget,
                                  BoundOptions options) {
    BoundReport report = bound_estimate(spec, m, options);
    if (budget.restarts == 0) throw Error(ErrorCode::invalid_argument, "verify_irreducibility: restarts must be >= 1");

    const auto train = sample_corpus(spec, budget.train_examples, {ContextMode::blank, derive_seed(options.stream, {stream::restart})});
    const auto select = sample_corpus(spec, budget.selection_examples, {ContextMode::blank, derive_seed(options.stream, {stream::heldout})});

    std::optional<MixtureModel> best;
    double best_loss = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < budget.restarts; ++r) {
        Stage1Config cfg = budget.trainer;
        cfg.k = 1;
        cfg.seed = derive_seed(budget.trainer.seed, {stream::restart, r});
        auto trained = train_stage1(train, cfg);
        const double loss = mle_loss(trained.model, select);
        if (loss < best_loss) {
            best_loss = loss;
            best = std::move(trained.model);
        }
    }

    const auto ce = oracle_population_ce(spec, *best, m, {options.pairs_per_prompt, options.stream});
    report.single_bt_ce = ce.mean;
    report.single_bt_std_error = ce.std_error;
    report.satisfied = report.single_bt_ce >= report.bound - 3.0 * report.mc_std_error;
    return report;
}

HeadMatch match_heads(const MixtureModel& model, const PopulationSpec& spec, std::size_t n_pairs, std::uint64_t stream_id) {
    model.validate();
    spec.validate();
    require_dim("model pair features vs population", spec.pair_dim(), model.pair_dim());
    if (model.k() < spec.k) throw Error(ErrorCode::invalid_argument, "match_heads: model has fewer heads than the population");
    if (n_pairs == 0) throw Error(ErrorCode::invalid_argument, "match_heads: n_pairs must be >= 1");

    const std::size_t kt = spec.k, kl = model.k();
    std::vector<std::vector<double>> agree(kt, std::vector<double>(kl, 0.0));
    for (std::size_t i = 0; i < n_pairs; ++i) {
        const auto cand = draw_candidates(spec, stream_id, i);
        for (std::size_t a = 0; a < kt; ++a) {
            const double st = score(spec.true_heads[a], cand.first, cand.second);
            for (std::size_t b = 0; b < kl; ++b) {
                const double sl = score(model.heads[b], cand.first, cand.second);
                if ((st > 0.0 && sl > 0.0) || (st < 0.0 && sl < 0.0)) agree[a][b] += 1.0;
            }
        }
    }
    for (auto& row : agree) {
        for (auto& v : row) v /= static_cast<double>(n_pairs);
    }

    std::vector<std::size_t> perm(kl);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    HeadMatch best;
    double best_total = -1.0;
    do {
        double total = 0.0;
        for (std::size_t a = 0; a < kt; ++a) total += agree[a][perm[a]];
        if (total > best_total) {
            best_total = total;
            best.permutation.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(kt));
        }
    } while (std::next_permutation(perm.begin(), perm.end()));

    best.agreement.resize(kt);
    best.min_agreement = 1.0;
    for (std::size_t a = 0; a < kt; ++a) {
        best.agreement[a] = agree[a][best.permutation[a]];
        best.min_agreement = std::min(best.min_agreement, best.agreement[a]);
    }
    return best;
}

double bayes_accuracy(const PopulationSpec& spec, const std::vector<PreferenceExample>& corpus, bool group_known) {
    if (corpus.empty()) throw Error(ErrorCode::empty_input, "bayes_accuracy: corpus is empty");
    double sum = 0.0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& ex = corpus[i];
        double p = 0.0;
        if (group_known) {
            if (!ex.group_id) throw Error(ErrorCode::invalid_argument, "bayes_accuracy: example lacks group_id", i);
            p = bt_probability(score(spec.true_heads.at(static_cast<std::size_t>(*ex.group_id)), ex.winner, ex.loser));
        } else {
            require_dim("router input vs population", spec.router_input_dim(), ex.prompt_ctx.size());
            const auto gamma = group_weights(spec, std::span<const double>(ex.prompt_ctx).first(spec.prompt_dim));
            for (std::size_t k = 0; k < spec.k; ++k) {
                p += gamma[k] * bt_probability(score(spec.true_heads[k], ex.winner, ex.loser));
            }
        }
        sum += std::max(p, 1.0 - p);
    }
    return sum / static_cast<double>(corpus.size());
}

std::vector<BudgetPoint> budget_sweep(const MixtureModel& model, const std::vector<PreferenceExample>& context_pool,
                                      const std::vector<PreferenceExample>& heldout, std::span<const std::size_t> budgets,
                                      const Stage2Config& config, std::size_t repeats) {
    if (repeats == 0) throw Error(ErrorCode::invalid_argument, "budget_sweep: repeats must be >= 1");
    if (!std::is_sorted(budgets.begin(), budgets.end())) {
        throw Error(ErrorCode::invalid_argument, "budget_sweep: budgets must be sorted ascending");
    }
    std::map<std::string, std::size_t> group_sizes;
    for (std::size_t i = 0; i < context_pool.size(); ++i) {
        if (!context_pool[i].context_group) {
            throw Error(ErrorCode::invalid_argument, "budget_sweep: pool example lacks a context_group", i);
        }
        ++group_sizes[*context_pool[i].context_group];
    }
    std::size_t smallest = std::numeric_limits<std::size_t>::max();
    for (const auto& [name, count] : group_sizes) smallest = std::min(smallest, count);

    const double static_accuracy = evaluate(model, heldout).average_accuracy;
    std::vector<BudgetPoint> curve;
    for (std::size_t budget : budgets) {
        if (budget > 0 && (group_sizes.empty() || budget > smallest)) {
            std::ostringstream msg;
            msg << "budget_sweep: budget " << budget << " exceeds the smallest context group ("
                << (group_sizes.empty() ? 0 : smallest) << " examples)";
            throw Error(ErrorCode::invalid_argument, msg.str());
        }
        BudgetPoint point;
        point.budget = budget;
        for (std::size_t r = 0; r < repeats; ++r) {
            if (budget == 0) {
                point.runs.push_back(static_accuracy);
                continue;
            }
            Stage2Config cfg = config;
            cfg.budget_per_attribute = budget;
            cfg.seed = derive_seed(config.seed, {stream::subsample, budget, r});
            const auto subset = apply_budget(context_pool, budget, cfg.seed);
            const auto adapted = run_algorithm1(model, subset, cfg);
            point.runs.push_back(evaluate(adapted.model, heldout).average_accuracy);
        }
        const double n = static_cast<double>(point.runs.size());
        point.mean_accuracy = std::accumulate(point.runs.begin(), point.runs.end(), 0.0) / n;
        double ss = 0.0;
        for (double v : point.runs) ss += (v - point.mean_accuracy) * (v - point.mean_accuracy);
        point.std_accuracy = point.runs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
        curve.push_back(std::move(point));
    }
    return curve;
}

} // namespace micro
