#include "micro/stage2.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>

#include "micro/error.hpp"
#include "micro/rng.hpp"
#include "micro/stage1.hpp"

namespace micro {

void Stage2Config::validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::invalid_argument, "Stage2Config: " + m); };
    if (!(tau > 0.0)) fail("tau must be > 0");
    if (budget_per_attribute == 0) fail("budget_per_attribute must be positive");
    if (batch_size == 0) fail("batch_size must be positive");
    if (epochs == 0) fail("epochs must be positive");
    if (!(router_lr > 0.0)) fail("router_lr must be > 0");
}

std::vector<double> per_head_losses(const MixtureModel& model, const PreferenceExample& ex) {
    require_dim("winner features", model.pair_dim(), ex.winner.size());
    require_dim("loser features", model.pair_dim(), ex.loser.size());
    std::vector<double> out(model.k());
    for (std::size_t k = 0; k < model.k(); ++k) out[k] = -log_bt_probability(head_delta(model.heads[k], ex));
    return out;
}

std::vector<double> hedge_update(std::span<const double> omega, std::span<const double> losses, double tau) {
    if (!(tau > 0.0)) {
        std::ostringstream msg;
        msg << "hedge_update: tau must be > 0, got " << tau;
        throw Error(ErrorCode::invalid_argument, msg.str());
    }
    require_dim("hedge losses", omega.size(), losses.size());
    const std::size_t k = omega.size();
    std::vector<double> out(k);
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
        out[c] = omega[c] > 0.0 ? std::log(omega[c]) - losses[c] / tau : -std::numeric_limits<double>::infinity();
        hi = std::max(hi, out[c]);
    }
    if (!std::isfinite(hi)) throw Error(ErrorCode::invalid_argument, "hedge_update: omega has no positive mass");
    double z = 0.0;
    for (auto& v : out) {
        v = std::exp(v - hi);
        z += v;
    }
    for (auto& v : out) v /= z;
    return out;
}

HedgeState compute_soft_labels(const MixtureModel& model, BatchView batch, double tau) {
    HedgeState state;
    state.omega.reserve(batch.size());
    state.per_head_loss.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto losses = per_head_losses(model, batch[i]);
        const auto prior = router_forward(model.router, batch[i].prompt_ctx);
        state.omega.push_back(hedge_update(prior, losses, tau));
        state.per_head_loss.push_back(std::move(losses));
    }
    return state;
}

RouteScore route_and_score(const MixtureModel& model, const PreferenceExample& ex) {
    check_example(model, ex);
    RouteScore out;
    out.weights = router_forward(model.router, ex.prompt_ctx);
    double p = 0.0, margin = 0.0;
    for (std::size_t k = 0; k < model.k(); ++k) {
        const double d = head_delta(model.heads[k], ex);
        p += out.weights[k] * bt_probability(d);
        // sigma(d) - 1/2 = tanh(d/2) / 2, exact zero on ties
        margin += out.weights[k] * std::tanh(0.5 * d);
    }
    out.p_mix = p;
    out.predicts_winner = margin > 0.0;
    return out;
}

double routing_accuracy(const MixtureModel& model, BatchView batch) {
    if (batch.empty()) throw Error(ErrorCode::empty_input, "routing_accuracy: batch is empty");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) correct += route_and_score(model, batch[i]).predicts_winner ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(batch.size());
}

std::vector<PreferenceExample> apply_budget(const std::vector<PreferenceExample>& corpus, std::size_t budget,
                                            std::uint64_t seed) {
    std::map<std::string, std::vector<std::size_t>> by_group;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (!corpus[i].context_group) {
            throw Error(ErrorCode::invalid_argument, "apply_budget: example lacks a context_group", i);
        }
        by_group[*corpus[i].context_group].push_back(i);
    }
    std::vector<std::size_t> keep;
    std::uint64_t group_index = 0;
    for (auto& [name, members] : by_group) {
        Rng rng(seed, {stream::subsample, group_index++});
        std::shuffle(members.begin(), members.end(), rng);
        members.resize(std::min(budget, members.size()));
        keep.insert(keep.end(), members.begin(), members.end());
    }
    std::sort(keep.begin(), keep.end());
    std::vector<PreferenceExample> out;
    out.reserve(keep.size());
    for (auto i : keep) out.push_back(corpus[i]);
    return out;
}

Stage2Result run_algorithm1(const MixtureModel& model, const std::vector<PreferenceExample>& context_corpus,
                            const Stage2Config& config, const std::vector<PreferenceExample>* heldout) {
    config.validate();
    model.validate();
    std::map<std::string, std::size_t> group_counts;
    for (std::size_t i = 0; i < context_corpus.size(); ++i) {
        const auto& ex = context_corpus[i];
        if (!ex.context_group) {
            throw Error(ErrorCode::invalid_argument, "run_algorithm1: example " + std::to_string(i) + " has no context features",
                        i);
        }
        check_example(model, ex);
        if (++group_counts[*ex.context_group] > config.budget_per_attribute) {
            throw Error(ErrorCode::invalid_argument,
                        "run_algorithm1: context group '" + *ex.context_group + "' exceeds the labeling budget", i);
        }
    }

    Stage2Result result{model, {}};
    const std::size_t n = context_corpus.size();
    if (n == 0) return result;

    // Heads are frozen, so the per-head losses are fixed for the whole run.
    std::vector<std::vector<double>> losses(n);
    for (std::size_t i = 0; i < n; ++i) losses[i] = per_head_losses(model, context_corpus[i]);

    RouterParams& router = result.model.router;
    std::vector<double> params = flatten(router);
    AdamW optimizer(params.size());
    std::vector<std::vector<double>> targets(n);
    std::vector<std::size_t> order(n);

    auto refresh = [&](std::size_t i) {
        targets[i] = hedge_update(router_forward(router, context_corpus[i].prompt_ctx), losses[i], config.tau);
    };

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        if (config.recompute_weights_once_per_epoch) {
            for (std::size_t i = 0; i < n; ++i) refresh(i);
        }
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(config.seed, {stream::shuffle, epoch});
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
            const std::size_t end = std::min(n, begin + config.batch_size);
            const std::span<const std::size_t> idx(order.data() + begin, end - begin);
            if (!config.recompute_weights_once_per_epoch) {
                for (auto i : idx) refresh(i);
            }
            std::vector<std::vector<double>> batch_targets;
            batch_targets.reserve(idx.size());
            for (auto i : idx) batch_targets.push_back(targets[i]);
            const auto grads = router_soft_label_gradients(router, BatchView(context_corpus, idx), batch_targets);
            optimizer.step(params, flatten(grads.router), config.router_lr);
            assign(router, params);
        }

        Stage2LogEntry entry;
        entry.epoch = epoch;
        double ce = 0.0, h = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            h += entropy(targets[i]);
            const auto pass = router_pass(router, context_corpus[i].prompt_ctx);
            for (std::size_t k = 0; k < targets[i].size(); ++k) {
                if (targets[i][k] > 0.0) ce -= targets[i][k] * pass.log_weights[k];
            }
        }
        entry.mean_soft_label_entropy = h / static_cast<double>(n);
        entry.router_ce = ce / static_cast<double>(n);
        entry.heldout_accuracy = heldout && !heldout->empty() ? routing_accuracy(result.model, *heldout)
                                                             : std::numeric_limits<double>::quiet_NaN();
        result.log.push_back(entry);
    }
    return result;
}

} // namespace micro
