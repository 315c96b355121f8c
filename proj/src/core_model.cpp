#include "micro/core_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "micro/error.hpp"
#include "micro/parallel.hpp"

namespace micro {

namespace {

constexpr std::size_t kLossChunk = 256;

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double log_sum_exp(std::span<const double> v) {
    double hi = -std::numeric_limits<double>::infinity();
    for (double x : v) hi = std::max(hi, x);
    if (!std::isfinite(hi)) return hi;
    double s = 0.0;
    for (double x : v) s += std::exp(x - hi);
    return hi + std::log(s);
}

template <class PerExample>
double batch_mean(BatchView batch, const char* what, PerExample&& per_example) {
    if (batch.empty()) {
        throw Error(ErrorCode::empty_input, std::string(what) + ": batch is empty");
    }
    auto partial = map_chunks<double>(batch.size(), kLossChunk, [&](std::size_t b, std::size_t e) {
        double s = 0.0;
        for (std::size_t i = b; i < e; ++i) s += per_example(batch[i]);
        return s;
    });
    return std::accumulate(partial.begin(), partial.end(), 0.0) / static_cast<double>(batch.size());
}

} // namespace

RouterParams RouterParams::zeros(std::size_t input_dim, std::size_t hidden_size, std::size_t k) {
    RouterParams r;
    r.hidden_weights = Matrix(hidden_size, input_dim);
    r.hidden_bias.assign(hidden_size, 0.0);
    r.output_weights = Matrix(k, hidden_size);
    r.output_bias.assign(k, 0.0);
    return r;
}

void RouterParams::validate() const {
    require_dim("router hidden_weights storage", hidden_weights.rows * hidden_weights.cols, hidden_weights.data.size());
    require_dim("router output_weights storage", output_weights.rows * output_weights.cols, output_weights.data.size());
    require_dim("router hidden_bias", hidden_weights.rows, hidden_bias.size());
    require_dim("router output_weights columns", hidden_weights.rows, output_weights.cols);
    require_dim("router output_bias", output_weights.rows, output_bias.size());
    if (output_weights.rows == 0) {
        throw Error(ErrorCode::invalid_argument, "router must have at least one output");
    }
}

RouterPass router_pass(const RouterParams& router, std::span<const double> input) {
    require_dim("router input", router.input_dim(), input.size());
    const std::size_t h = router.hidden_size();
    const std::size_t k = router.output_dim();

    RouterPass pass;
    pass.hidden.resize(h);
    for (std::size_t j = 0; j < h; ++j) {
        pass.hidden[j] = std::tanh(dot(router.hidden_weights.row(j), input) + router.hidden_bias[j]);
    }
    std::vector<double> logits(k);
    for (std::size_t c = 0; c < k; ++c) {
        logits[c] = dot(router.output_weights.row(c), pass.hidden) + router.output_bias[c];
    }
    const double lse = log_sum_exp(logits);
    pass.log_weights.resize(k);
    pass.weights.resize(k);
    for (std::size_t c = 0; c < k; ++c) {
        pass.log_weights[c] = logits[c] - lse;
        pass.weights[c] = std::exp(pass.log_weights[c]);
    }
    return pass;
}

FeatureVector router_forward(const RouterParams& router, std::span<const double> input) {
    return router_pass(router, input).weights;
}

void MixtureModel::validate() const {
    if (heads.empty()) {
        throw Error(ErrorCode::invalid_argument, "mixture model needs at least one head");
    }
    router.validate();
    require_dim("router outputs vs heads", heads.size(), router.output_dim());
    for (const auto& head : heads) require_dim("head weights", pair_dim(), head.weights.size());
}

double head_reward(const RewardHead& head, std::span<const double> pair_features) {
    require_dim("pair features", head.weights.size(), pair_features.size());
    return dot(head.weights, pair_features) + head.bias;
}

double head_delta(const RewardHead& head, const PreferenceExample& ex) {
    return head_reward(head, ex.winner) - head_reward(head, ex.loser);
}

double bt_probability(double delta) {
    if (delta >= 0.0) return 1.0 / (1.0 + std::exp(-delta));
    const double e = std::exp(delta);
    return e / (1.0 + e);
}

double log_bt_probability(double delta) {
    // -softplus(-delta)
    if (delta >= 0.0) return -std::log1p(std::exp(-delta));
    return delta - std::log1p(std::exp(delta));
}

void check_example(const MixtureModel& model, const PreferenceExample& ex) {
    require_dim("winner features", model.pair_dim(), ex.winner.size());
    require_dim("loser features", model.pair_dim(), ex.loser.size());
    require_dim("router input", model.router_input_dim(), ex.prompt_ctx.size());
}

double mixture_probability(const MixtureModel& model, const PreferenceExample& ex) {
    check_example(model, ex);
    const auto weights = router_forward(model.router, ex.prompt_ctx);
    double p = 0.0;
    for (std::size_t k = 0; k < model.k(); ++k) {
        p += weights[k] * bt_probability(head_delta(model.heads[k], ex));
    }
    return p;
}

double log_mixture_probability(const MixtureModel& model, const PreferenceExample& ex) {
    check_example(model, ex);
    const auto pass = router_pass(model.router, ex.prompt_ctx);
    std::vector<double> terms(model.k());
    for (std::size_t k = 0; k < model.k(); ++k) {
        terms[k] = pass.log_weights[k] + log_bt_probability(head_delta(model.heads[k], ex));
    }
    return log_sum_exp(terms);
}

double mle_loss(const MixtureModel& model, BatchView batch) {
    return batch_mean(batch, "mle_loss", [&](const PreferenceExample& ex) { return -log_mixture_probability(model, ex); });
}

double entropy(std::span<const double> weights) {
    double h = 0.0;
    for (double w : weights) {
        if (w > 0.0) h -= w * std::log(w);
    }
    return h;
}

double reg_loss(const MixtureModel& model, BatchView batch) {
    return batch_mean(batch, "reg_loss", [&](const PreferenceExample& ex) {
        require_dim("router input", model.router_input_dim(), ex.prompt_ctx.size());
        const auto pass = router_pass(model.router, ex.prompt_ctx);
        double s = 0.0;
        for (std::size_t k = 0; k < pass.weights.size(); ++k) s += pass.weights[k] * pass.log_weights[k];
        return s;
    });
}

double total_loss(const MixtureModel& model, BatchView batch, double alpha) {
    if (!(alpha >= 0.0)) {
        std::ostringstream msg;
        msg << "total_loss: alpha must be >= 0, got " << alpha;
        throw Error(ErrorCode::invalid_argument, msg.str());
    }
    return mle_loss(model, batch) + alpha * reg_loss(model, batch);
}

double mean_router_entropy(const MixtureModel& model, BatchView batch) {
    return batch_mean(batch, "mean_router_entropy", [&](const PreferenceExample& ex) {
        return entropy(router_forward(model.router, ex.prompt_ctx));
    });
}

} // namespace micro
