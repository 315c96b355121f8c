#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "micro/core_model.hpp"

namespace micro {

/// Stage-1 mixture training configuration.
struct Stage1Config {
    double alpha = 0.5;
    double learning_rate = 2e-3;
    std::size_t batch_size = 4;
    std::size_t grad_accum_steps = 8;
    double warmup_ratio = 0.05;
    std::size_t epochs = 1;
    std::uint64_t seed = 0;
    std::size_t k = 2;
    std::size_t hidden_size = 128;
    double weight_decay = 0.0;

    void validate() const;
    bool operator==(const Stage1Config&) const = default;
};

/// Gradient of total_loss, shaped like a MixtureModel.
struct GradientBundle {
    std::vector<RewardHead> heads;
    RouterParams router;
    double loss = 0.0;
    double mle = 0.0;
    double reg = 0.0;
};

/// Fresh model: head weights ~ N(0, 0.02^2), zero biases; router hidden
/// weights ~ N(0, 1/d_ctx), output weights ~ N(0, 0.02^2), zero biases.
MixtureModel init_model(std::size_t k, std::size_t pair_dim, std::size_t router_input_dim, std::size_t hidden_size,
                        std::uint64_t seed);

/// Exact analytic gradient of mle_loss + alpha * reg_loss over `batch`.
GradientBundle compute_gradients(const MixtureModel& model, BatchView batch, double alpha);

/// Router-only gradient of the mean soft-label cross-entropy
/// -(1/n) sum_i sum_k targets[i][k] log f_k(x_i). Returns the loss in `loss`.
GradientBundle router_soft_label_gradients(const RouterParams& router, BatchView batch,
                                           std::span<const std::vector<double>> targets);

// Flat parameter views. Order: heads (weights then bias, head by head),
// then router hidden_weights, hidden_bias, output_weights, output_bias.
std::size_t parameter_count(const MixtureModel& model);
std::vector<double> flatten(const MixtureModel& model);
void assign(MixtureModel& model, std::span<const double> params);
std::vector<double> flatten(const GradientBundle& grads);
std::vector<double> flatten(const RouterParams& router);
void assign(RouterParams& router, std::span<const double> params);
/// Human-readable name of flat coordinate `index`, e.g. "head[1].w[3]".
std::string parameter_name(const MixtureModel& model, std::size_t index);
/// Flat indices of every bias coordinate.
std::vector<std::size_t> bias_indices(const MixtureModel& model);

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
};

/// Adaptive-moment optimizer with decoupled weight decay.
class AdamW {
public:
    AdamW(std::size_t parameter_count, AdamOptions options = {});

    void step(std::span<double> params, std::span<const double> grads, double learning_rate);
    std::size_t steps() const { return t_; }

private:
    AdamOptions options_;
    std::vector<double> m_;
    std::vector<double> v_;
    std::size_t t_ = 0;
};

struct Stage1LogEntry {
    std::size_t step = 0;
    double mle_loss = 0.0;
    double reg_loss = 0.0;
    double total_loss = 0.0;
    double mean_router_entropy = 0.0;
    double learning_rate = 0.0;
};

struct Stage1Result {
    MixtureModel model;
    std::vector<Stage1LogEntry> log;
};

/// Minibatch AdamW over shuffled epochs with linear warmup then a constant
/// rate. `initial` overrides init_model (its k/dims must match the corpus).
/// Throws ErrorCode::divergence with the step index on a non-finite loss.
Stage1Result train_stage1(const std::vector<PreferenceExample>& corpus, const Stage1Config& config,
                          std::optional<MixtureModel> initial = std::nullopt);

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    /// Fraction of non-bias coordinates checked; biases are always checked.
    double coordinate_fraction = 0.05;
    std::uint64_t seed = 0;
};

struct GradCheckFailure {
    std::size_t index = 0;
    std::string name;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    bool passed = true;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::vector<GradCheckFailure> failures;
    /// Set when the comparison is dominated by finite-difference truncation
    /// rather than by the analytic gradient.
    bool discretization_warning = false;
    std::string warning;
};

/// |a - n| / max(|a|, |n|, 1e-6).
double gradient_rel_error(double analytic, double numeric);

/// Central-difference check of `analytic` against total_loss.
GradCheckReport grad_check(const MixtureModel& model, BatchView batch, double alpha, const GradientBundle& analytic,
                           GradCheckOptions options = {});
GradCheckReport grad_check(const MixtureModel& model, BatchView batch, double alpha, GradCheckOptions options = {});

} // namespace micro
