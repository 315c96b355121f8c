#include "micro/stage1.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "micro/error.hpp"
#include "micro/parallel.hpp"
#include "micro/rng.hpp"

namespace micro {

namespace {

constexpr std::size_t kGradChunk = 64;

GradientBundle zero_bundle(const MixtureModel& model) {
    GradientBundle g;
    g.heads.reserve(model.k());
    for (const auto& h : model.heads) g.heads.push_back({FeatureVector(h.weights.size(), 0.0), 0.0});
    g.router = RouterParams::zeros(model.router.input_dim(), model.router.hidden_size(), model.router.output_dim());
    return g;
}

void add_into(GradientBundle& acc, const GradientBundle& part) {
    for (std::size_t k = 0; k < acc.heads.size(); ++k) {
        auto& w = acc.heads[k].weights;
        const auto& pw = part.heads[k].weights;
        for (std::size_t i = 0; i < w.size(); ++i) w[i] += pw[i];
        acc.heads[k].bias += part.heads[k].bias;
    }
    auto add = [](std::vector<double>& a, const std::vector<double>& b) {
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    };
    add(acc.router.hidden_weights.data, part.router.hidden_weights.data);
    add(acc.router.hidden_bias, part.router.hidden_bias);
    add(acc.router.output_weights.data, part.router.output_weights.data);
    add(acc.router.output_bias, part.router.output_bias);
    acc.loss += part.loss;
    acc.mle += part.mle;
    acc.reg += part.reg;
}

void scale(GradientBundle& g, double s) {
    for (auto& h : g.heads) {
        for (auto& w : h.weights) w *= s;
        h.bias *= s;
    }
    for (auto& v : g.router.hidden_weights.data) v *= s;
    for (auto& v : g.router.hidden_bias) v *= s;
    for (auto& v : g.router.output_weights.data) v *= s;
    for (auto& v : g.router.output_bias) v *= s;
    g.loss *= s;
    g.mle *= s;
    g.reg *= s;
}

// Backprop d(loss)/d(logits) through the router for one input.
void router_backward(const RouterParams& router, const RouterPass& pass, std::span<const double> input,
                     std::span<const double> grad_logits, RouterParams& out) {
    const std::size_t h = router.hidden_size();
    const std::size_t k = router.output_dim();
    std::vector<double> grad_hidden(h, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
        const double gz = grad_logits[c];
        out.output_bias[c] += gz;
        auto row = out.output_weights.row(c);
        const auto wrow = router.output_weights.row(c);
        for (std::size_t j = 0; j < h; ++j) {
            row[j] += gz * pass.hidden[j];
            grad_hidden[j] += gz * wrow[j];
        }
    }
    for (std::size_t j = 0; j < h; ++j) {
        const double ga = grad_hidden[j] * (1.0 - pass.hidden[j] * pass.hidden[j]);
        out.hidden_bias[j] += ga;
        auto row = out.hidden_weights.row(j);
        for (std::size_t i = 0; i < input.size(); ++i) row[i] += ga * input[i];
    }
}

template <class PerChunk>
GradientBundle reduce_chunks(std::size_t n, GradientBundle zero, PerChunk&& per_chunk) {
    auto parts = map_chunks<GradientBundle>(n, kGradChunk, [&](std::size_t b, std::size_t e) {
        GradientBundle g = zero;
        per_chunk(g, b, e);
        return g;
    });
    GradientBundle total = std::move(zero);
    for (const auto& p : parts) add_into(total, p);
    scale(total, 1.0 / static_cast<double>(n));
    return total;
}

void append(std::vector<double>& out, const std::vector<double>& v) { out.insert(out.end(), v.begin(), v.end()); }

void append_router(std::vector<double>& out, const RouterParams& r) {
    append(out, r.hidden_weights.data);
    append(out, r.hidden_bias);
    append(out, r.output_weights.data);
    append(out, r.output_bias);
}

std::size_t read_router(RouterParams& r, std::span<const double> p, std::size_t pos) {
    auto take = [&](std::vector<double>& v) {
        std::copy(p.begin() + static_cast<std::ptrdiff_t>(pos), p.begin() + static_cast<std::ptrdiff_t>(pos + v.size()), v.begin());
        pos += v.size();
    };
    take(r.hidden_weights.data);
    take(r.hidden_bias);
    take(r.output_weights.data);
    take(r.output_bias);
    return pos;
}

std::size_t router_parameter_count(const RouterParams& r) {
    return r.hidden_weights.data.size() + r.hidden_bias.size() + r.output_weights.data.size() + r.output_bias.size();
}

} // namespace

void Stage1Config::validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::invalid_argument, "Stage1Config: " + m); };
    if (!(alpha >= 0.0)) fail("alpha must be >= 0");
    if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
    if (batch_size == 0) fail("batch_size must be positive");
    if (grad_accum_steps == 0) fail("grad_accum_steps must be positive");
    if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) fail("warmup_ratio must lie in [0, 1]");
    if (epochs == 0) fail("epochs must be positive");
    if (k == 0) fail("k must be positive");
    if (hidden_size == 0) fail("hidden_size must be positive");
    if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
}

MixtureModel init_model(std::size_t k, std::size_t pair_dim, std::size_t router_input_dim, std::size_t hidden_size,
                        std::uint64_t seed) {
    Rng rng(seed, {stream::init});
    MixtureModel model;
    for (std::size_t c = 0; c < k; ++c) {
        RewardHead head{FeatureVector(pair_dim), 0.0};
        for (auto& w : head.weights) w = rng.normal(0.0, 0.02);
        model.heads.push_back(std::move(head));
    }
    model.router = RouterParams::zeros(router_input_dim, hidden_size, k);
    const double hidden_std = router_input_dim > 0 ? 1.0 / std::sqrt(static_cast<double>(router_input_dim)) : 0.0;
    for (auto& w : model.router.hidden_weights.data) w = rng.normal(0.0, hidden_std);
    for (auto& w : model.router.output_weights.data) w = rng.normal(0.0, 0.02);
    return model;
}

GradientBundle compute_gradients(const MixtureModel& model, BatchView batch, double alpha) {
    if (batch.empty()) throw Error(ErrorCode::empty_input, "compute_gradients: batch is empty");
    if (!(alpha >= 0.0)) throw Error(ErrorCode::invalid_argument, "compute_gradients: alpha must be >= 0");
    const std::size_t k = model.k();

    return reduce_chunks(batch.size(), zero_bundle(model), [&](GradientBundle& g, std::size_t b, std::size_t e) {
        std::vector<double> delta(k), log_terms(k), grad_logits(k);
        for (std::size_t i = b; i < e; ++i) {
            const PreferenceExample& ex = batch[i];
            check_example(model, ex);
            const auto pass = router_pass(model.router, ex.prompt_ctx);

            double hi = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                delta[c] = head_delta(model.heads[c], ex);
                log_terms[c] = pass.log_weights[c] + log_bt_probability(delta[c]);
                hi = std::max(hi, log_terms[c]);
            }
            double s = 0.0;
            for (std::size_t c = 0; c < k; ++c) s += std::exp(log_terms[c] - hi);
            const double log_pmix = hi + std::log(s);

            double neg_entropy = 0.0;
            for (std::size_t c = 0; c < k; ++c) neg_entropy += pass.weights[c] * pass.log_weights[c];

            if (!std::isfinite(log_pmix) || !std::isfinite(neg_entropy)) {
                throw Error(ErrorCode::non_finite, "compute_gradients: non-finite loss term at example " + std::to_string(i), i);
            }

            for (std::size_t c = 0; c < k; ++c) {
                // posterior responsibility f_k p_k / p_mix
                const double q = std::exp(log_terms[c] - log_pmix);
                const double d_delta = -q * bt_probability(-delta[c]);
                auto& gw = g.heads[c].weights;
                for (std::size_t j = 0; j < gw.size(); ++j) gw[j] += d_delta * (ex.winner[j] - ex.loser[j]);
                grad_logits[c] = (pass.weights[c] - q) + alpha * pass.weights[c] * (pass.log_weights[c] - neg_entropy);
                if (!std::isfinite(grad_logits[c]) || !std::isfinite(d_delta)) {
                    throw Error(ErrorCode::non_finite, "compute_gradients: non-finite gradient at example " + std::to_string(i), i);
                }
            }
            router_backward(model.router, pass, ex.prompt_ctx, grad_logits, g.router);

            g.mle += -log_pmix;
            g.reg += neg_entropy;
            g.loss += -log_pmix + alpha * neg_entropy;
        }
    });
}

GradientBundle router_soft_label_gradients(const RouterParams& router, BatchView batch,
                                           std::span<const std::vector<double>> targets) {
    if (batch.empty()) throw Error(ErrorCode::empty_input, "router_soft_label_gradients: batch is empty");
    require_dim("soft-label targets", batch.size(), targets.size());
    GradientBundle zero;
    zero.router = RouterParams::zeros(router.input_dim(), router.hidden_size(), router.output_dim());
    const std::size_t k = router.output_dim();

    auto parts = map_chunks<GradientBundle>(batch.size(), kGradChunk, [&](std::size_t b, std::size_t e) {
        GradientBundle g = zero;
        std::vector<double> grad_logits(k);
        for (std::size_t i = b; i < e; ++i) {
            const auto& target = targets[i];
            require_dim("soft label", k, target.size());
            const auto pass = router_pass(router, batch[i].prompt_ctx);
            double mass = 0.0, ce = 0.0;
            for (std::size_t c = 0; c < k; ++c) {
                mass += target[c];
                if (target[c] > 0.0) ce -= target[c] * pass.log_weights[c];
            }
            for (std::size_t c = 0; c < k; ++c) grad_logits[c] = pass.weights[c] * mass - target[c];
            router_backward(router, pass, batch[i].prompt_ctx, grad_logits, g.router);
            g.loss += ce;
        }
        return g;
    });
    GradientBundle total = std::move(zero);
    for (const auto& p : parts) add_into(total, p);
    scale(total, 1.0 / static_cast<double>(batch.size()));
    return total;
}

std::size_t parameter_count(const MixtureModel& model) {
    std::size_t n = 0;
    for (const auto& h : model.heads) n += h.weights.size() + 1;
    return n + router_parameter_count(model.router);
}

std::vector<double> flatten(const MixtureModel& model) {
    std::vector<double> out;
    out.reserve(parameter_count(model));
    for (const auto& h : model.heads) {
        append(out, h.weights);
        out.push_back(h.bias);
    }
    append_router(out, model.router);
    return out;
}

void assign(MixtureModel& model, std::span<const double> params) {
    require_dim("flat parameters", parameter_count(model), params.size());
    std::size_t pos = 0;
    for (auto& h : model.heads) {
        std::copy_n(params.begin() + static_cast<std::ptrdiff_t>(pos), h.weights.size(), h.weights.begin());
        pos += h.weights.size();
        h.bias = params[pos++];
    }
    read_router(model.router, params, pos);
}

std::vector<double> flatten(const GradientBundle& grads) {
    std::vector<double> out;
    for (const auto& h : grads.heads) {
        append(out, h.weights);
        out.push_back(h.bias);
    }
    append_router(out, grads.router);
    return out;
}

std::vector<double> flatten(const RouterParams& router) {
    std::vector<double> out;
    out.reserve(router_parameter_count(router));
    append_router(out, router);
    return out;
}

void assign(RouterParams& router, std::span<const double> params) {
    require_dim("flat router parameters", router_parameter_count(router), params.size());
    read_router(router, params, 0);
}

std::string parameter_name(const MixtureModel& model, std::size_t index) {
    std::ostringstream name;
    for (std::size_t k = 0; k < model.k(); ++k) {
        const std::size_t d = model.heads[k].weights.size();
        if (index < d) {
            name << "head[" << k << "].w[" << index << "]";
            return name.str();
        }
        if (index == d) {
            name << "head[" << k << "].bias";
            return name.str();
        }
        index -= d + 1;
    }
    const auto& r = model.router;
    if (index < r.hidden_weights.data.size()) {
        name << "router.hidden_w[" << index / r.hidden_weights.cols << "," << index % r.hidden_weights.cols << "]";
        return name.str();
    }
    index -= r.hidden_weights.data.size();
    if (index < r.hidden_bias.size()) {
        name << "router.hidden_b[" << index << "]";
        return name.str();
    }
    index -= r.hidden_bias.size();
    if (index < r.output_weights.data.size()) {
        name << "router.output_w[" << index / r.output_weights.cols << "," << index % r.output_weights.cols << "]";
        return name.str();
    }
    index -= r.output_weights.data.size();
    name << "router.output_b[" << index << "]";
    return name.str();
}

std::vector<std::size_t> bias_indices(const MixtureModel& model) {
    std::vector<std::size_t> out;
    std::size_t pos = 0;
    for (const auto& h : model.heads) {
        pos += h.weights.size();
        out.push_back(pos++);
    }
    const auto& r = model.router;
    pos += r.hidden_weights.data.size();
    for (std::size_t j = 0; j < r.hidden_bias.size(); ++j) out.push_back(pos++);
    pos += r.output_weights.data.size();
    for (std::size_t c = 0; c < r.output_bias.size(); ++c) out.push_back(pos++);
    return out;
}

AdamW::AdamW(std::size_t parameter_count, AdamOptions options)
    : options_(options), m_(parameter_count, 0.0), v_(parameter_count, 0.0) {}

void AdamW::step(std::span<double> params, std::span<const double> grads, double learning_rate) {
    require_dim("AdamW parameters", m_.size(), params.size());
    require_dim("AdamW gradients", m_.size(), grads.size());
    ++t_;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = b1 * m_[i] + (1.0 - b1) * grads[i];
        v_[i] = b2 * v_[i] + (1.0 - b2) * grads[i] * grads[i];
        const double m_hat = m_[i] / c1;
        const double v_hat = v_[i] / c2;
        params[i] -= learning_rate * (m_hat / (std::sqrt(v_hat) + options_.epsilon) + options_.weight_decay * params[i]);
    }
}

Stage1Result train_stage1(const std::vector<PreferenceExample>& corpus, const Stage1Config& config,
                          std::optional<MixtureModel> initial) {
    config.validate();
    if (corpus.size() < config.batch_size) {
        throw Error(ErrorCode::invalid_argument, "train_stage1: corpus smaller than batch_size");
    }
    const std::size_t n = corpus.size();
    const std::size_t pair_dim = corpus.front().winner.size();
    const std::size_t ctx_dim = corpus.front().prompt_ctx.size();

    Stage1Result result;
    result.model = initial ? std::move(*initial) : init_model(config.k, pair_dim, ctx_dim, config.hidden_size, config.seed);
    MixtureModel& model = result.model;
    model.validate();
    require_dim("initial model heads vs config.k", config.k, model.k());
    for (std::size_t i = 0; i < n; ++i) {
        try {
            check_example(model, corpus[i]);
        } catch (const Error& e) {
            throw Error(ErrorCode::dimension_mismatch, std::string("train_stage1: example ") + std::to_string(i) + ": " + e.what(), i);
        }
    }

    const std::size_t micro_batches = (n + config.batch_size - 1) / config.batch_size;
    const std::size_t steps_per_epoch = (micro_batches + config.grad_accum_steps - 1) / config.grad_accum_steps;
    const std::size_t total_steps = steps_per_epoch * config.epochs;
    const auto warmup_steps = static_cast<std::size_t>(std::ceil(config.warmup_ratio * static_cast<double>(total_steps)));

    AdamW optimizer(parameter_count(model), {0.9, 0.999, 1e-8, config.weight_decay});
    std::vector<double> params = flatten(model);
    std::vector<double> grad_sum(params.size());
    std::vector<std::size_t> order(n);
    double last_finite = std::numeric_limits<double>::quiet_NaN();
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(config.seed, {stream::shuffle, epoch});
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        for (std::size_t mb = 0; mb < micro_batches; mb += config.grad_accum_steps, ++step) {
            const std::size_t mb_end = std::min(micro_batches, mb + config.grad_accum_steps);
            std::fill(grad_sum.begin(), grad_sum.end(), 0.0);
            Stage1LogEntry entry;
            entry.step = step;
            for (std::size_t b = mb; b < mb_end; ++b) {
                const std::size_t begin = b * config.batch_size;
                const std::size_t end = std::min(n, begin + config.batch_size);
                const BatchView batch(corpus, std::span<const std::size_t>(order).subspan(begin, end - begin));
                GradientBundle g;
                try {
                    g = compute_gradients(model, batch, config.alpha);
                } catch (const Error& e) {
                    if (e.code() != ErrorCode::non_finite) throw;
                    std::ostringstream msg;
                    msg << "train_stage1 diverged at step " << step << " (last finite loss " << last_finite << "): " << e.what();
                    throw Error(ErrorCode::divergence, msg.str(), step);
                }
                const auto flat = flatten(g);
                for (std::size_t i = 0; i < flat.size(); ++i) grad_sum[i] += flat[i];
                entry.mle_loss += g.mle;
                entry.reg_loss += g.reg;
                entry.total_loss += g.loss;
            }
            const double count = static_cast<double>(mb_end - mb);
            for (auto& v : grad_sum) v /= count;
            entry.mle_loss /= count;
            entry.reg_loss /= count;
            entry.total_loss /= count;
            entry.mean_router_entropy = 0.0 - entry.reg_loss;

            if (!std::isfinite(entry.total_loss)) {
                std::ostringstream msg;
                msg << "train_stage1 diverged at step " << step << " (last finite loss " << last_finite << ")";
                throw Error(ErrorCode::divergence, msg.str(), step);
            }
            last_finite = entry.total_loss;

            const double warm = warmup_steps == 0 ? 1.0 : std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup_steps));
            entry.learning_rate = config.learning_rate * warm;
            optimizer.step(params, grad_sum, entry.learning_rate);
            assign(model, params);
            result.log.push_back(entry);
        }
    }
    return result;
}

double gradient_rel_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const MixtureModel& model, BatchView batch, double alpha, const GradientBundle& analytic,
                           GradCheckOptions options) {
    if (!(options.step > 0.0)) throw Error(ErrorCode::invalid_argument, "grad_check: step must be > 0");
    const auto grads = flatten(analytic);
    auto params = flatten(model);
    require_dim("grad_check analytic gradient", params.size(), grads.size());

    const auto biases = bias_indices(model);
    std::vector<bool> selected(params.size(), false);
    for (auto b : biases) selected[b] = true;
    Rng rng(options.seed, {stream::grad_check});
    bool any_weight = false;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (selected[i]) continue;
        if (rng.uniform() < options.coordinate_fraction) {
            selected[i] = true;
            any_weight = true;
        }
    }
    if (!any_weight && options.coordinate_fraction > 0.0) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!selected[i]) {
                selected[i] = true;
                break;
            }
        }
    }

    MixtureModel probe = model;
    auto loss_at = [&](std::size_t i, double offset) {
        const double saved = params[i];
        params[i] = saved + offset;
        assign(probe, params);
        const double loss = total_loss(probe, batch, alpha);
        params[i] = saved;
        return loss;
    };
    auto central = [&](std::size_t i, double h) { return (loss_at(i, h) - loss_at(i, -h)) / (2.0 * h); };

    GradCheckReport report;
    std::size_t inconclusive = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!selected[i]) continue;
        ++report.checked;
        const double numeric = central(i, options.step);
        const double half = central(i, options.step / 2.0);
        // Richardson-style guard: if halving the step moves the estimate by
        // more than the tolerance, the difference quotient is not trustworthy.
        const bool truncation_dominated = gradient_rel_error(numeric, half) > options.tolerance;
        const double rel = gradient_rel_error(grads[i], numeric);
        if (truncation_dominated) {
            ++inconclusive;
            continue;
        }
        report.max_rel_error = std::max(report.max_rel_error, rel);
        if (rel >= options.tolerance) {
            report.failures.push_back({i, parameter_name(model, i), grads[i], numeric, rel});
        }
    }
    assign(probe, params);
    report.passed = report.failures.empty();
    if (inconclusive > 0 || options.step > 1e-3) {
        report.discretization_warning = true;
        std::ostringstream msg;
        msg << "finite-difference step " << options.step << " is truncation-dominated on " << inconclusive << " of "
            << report.checked << " coordinates; those were not compared";
        report.warning = msg.str();
    }
    return report;
}

GradCheckReport grad_check(const MixtureModel& model, BatchView batch, double alpha, GradCheckOptions options) {
    return grad_check(model, batch, alpha, compute_gradients(model, batch, alpha), options);
}

} // namespace micro
