#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace micro {

/// Dense embedding of a (prompt, response) pair or of a prompt plus context.
using FeatureVector = std::vector<double>;

/// Row-major dense matrix.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }

    bool operator==(const Matrix&) const = default;
};

/// Affine reward r(a) = weights . features(a) + bias.
struct RewardHead {
    FeatureVector weights;
    double bias = 0.0;

    bool operator==(const RewardHead&) const = default;
};

/// One-hidden-layer router: softmax(W_o tanh(W_h x + b_h) + b_o).
struct RouterParams {
    Matrix hidden_weights;      // h x d_ctx
    FeatureVector hidden_bias;  // h
    Matrix output_weights;      // K x h
    FeatureVector output_bias;  // K

    static RouterParams zeros(std::size_t input_dim, std::size_t hidden_size, std::size_t k);

    std::size_t input_dim() const { return hidden_weights.cols; }
    std::size_t hidden_size() const { return hidden_weights.rows; }
    std::size_t output_dim() const { return output_weights.rows; }

    /// Throws dimension_mismatch when the four blocks are inconsistent.
    void validate() const;

    bool operator==(const RouterParams&) const = default;
};

/// Intermediate values of one router evaluation, kept for backprop.
struct RouterPass {
    std::vector<double> hidden;       // tanh activations
    std::vector<double> log_weights;  // log-softmax of the logits
    std::vector<double> weights;      // exp(log_weights), on the simplex
};

RouterPass router_pass(const RouterParams& router, std::span<const double> input);

/// Router weights on the (K-1)-simplex.
FeatureVector router_forward(const RouterParams& router, std::span<const double> input);

struct MixtureModel {
    std::vector<RewardHead> heads;
    RouterParams router;

    std::size_t k() const { return heads.size(); }
    std::size_t pair_dim() const { return heads.empty() ? 0 : heads.front().weights.size(); }
    std::size_t router_input_dim() const { return router.input_dim(); }

    void validate() const;

    bool operator==(const MixtureModel&) const = default;
};

/// One comparison. `prompt_ctx` is the router input (prompt features with
/// any context features concatenated). `context_group` names the budget
/// bucket used by router adaptation.
struct PreferenceExample {
    FeatureVector prompt_ctx;
    FeatureVector winner;
    FeatureVector loser;
    std::optional<int> group_id;
    std::optional<std::string> attribute;
    std::optional<std::string> context_group;

    bool operator==(const PreferenceExample&) const = default;
};

/// Either a whole corpus or an index subset of it, without copying.
class BatchView {
public:
    BatchView(std::span<const PreferenceExample> examples) : examples_(examples) {}
    BatchView(const std::vector<PreferenceExample>& examples) : examples_(examples) {}
    BatchView(std::span<const PreferenceExample> examples, std::span<const std::size_t> indices)
        : examples_(examples), indices_(indices), indexed_(true) {}

    std::size_t size() const { return indexed_ ? indices_.size() : examples_.size(); }
    bool empty() const { return size() == 0; }
    const PreferenceExample& operator[](std::size_t i) const {
        return indexed_ ? examples_[indices_[i]] : examples_[i];
    }

private:
    std::span<const PreferenceExample> examples_;
    std::span<const std::size_t> indices_;
    bool indexed_ = false;
};

double head_reward(const RewardHead& head, std::span<const double> pair_features);

/// Reward gap r(winner) - r(loser) for one head.
double head_delta(const RewardHead& head, const PreferenceExample& ex);

/// Logistic function, evaluated on the branch that cannot overflow.
double bt_probability(double delta);

/// log sigma(delta) = -softplus(-delta); finite for any finite delta.
double log_bt_probability(double delta);

/// Throws dimension_mismatch if `ex` does not fit `model`.
void check_example(const MixtureModel& model, const PreferenceExample& ex);

/// sum_k f_k(x) * sigma(r_k(winner) - r_k(loser)).
double mixture_probability(const MixtureModel& model, const PreferenceExample& ex);

/// log of mixture_probability via log-sum-exp over heads.
double log_mixture_probability(const MixtureModel& model, const PreferenceExample& ex);

/// -(1/n) sum log P(winner > loser).
double mle_loss(const MixtureModel& model, BatchView batch);

/// (1/n) sum_k f_k log f_k: mean negative entropy of the router.
double reg_loss(const MixtureModel& model, BatchView batch);

double total_loss(const MixtureModel& model, BatchView batch, double alpha);

/// Shannon entropy (nats) of a simplex vector; 0 log 0 = 0.
double entropy(std::span<const double> weights);

/// Mean router entropy over a batch.
double mean_router_entropy(const MixtureModel& model, BatchView batch);

} // namespace micro
