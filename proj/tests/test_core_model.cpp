#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "helpers.hpp"
#include "micro/core_model.hpp"
#include "micro/error.hpp"

using namespace micro;
using micro::testing::random_batch;
using micro::testing::random_model;
using micro::testing::random_vector;

TEST(HeadReward, ZeroHeadIsZero) {
    RewardHead h{FeatureVector(5, 0.0), 0.0};
    EXPECT_EQ(head_reward(h, FeatureVector{1, -2, 3, 4, 5}), 0.0);
}

TEST(HeadReward, HandDotProduct) {
    RewardHead h{{1.0, 2.0}, 0.5};
    EXPECT_DOUBLE_EQ(head_reward(h, FeatureVector{1.0, 1.0}), 3.5);
}

TEST(HeadReward, MatchesScalarLoop) {
    Rng rw(7), rf(8);
    RewardHead h{random_vector(rw, 16), 0.25};
    const auto f = random_vector(rf, 16);
    long double acc = h.bias;
    for (int i = 0; i < 16; ++i) acc += static_cast<long double>(h.weights[i]) * f[i];
    EXPECT_NEAR(head_reward(h, f), static_cast<double>(acc), 1e-12);
}

TEST(HeadReward, DimensionMismatchNamesBothSizes) {
    RewardHead h{{1.0, 2.0, 3.0}, 0.0};
    try {
        head_reward(h, FeatureVector{1.0, 2.0});
        FAIL() << "expected a dimension error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::dimension_mismatch);
        EXPECT_EQ(e.expected(), 3u);
        EXPECT_EQ(e.actual(), 2u);
    }
}

TEST(BtProbability, Values) {
    EXPECT_EQ(bt_probability(0.0), 0.5);
    const double hi = bt_probability(30.0);
    EXPECT_GT(hi, 1.0 - 1e-13);
    EXPECT_LT(hi, 1.0);
    EXPECT_EQ(bt_probability(40.0), 1.0);
    const long double oracle = 1.0L / (1.0L + std::exp(-1.0L));
    EXPECT_NEAR(bt_probability(1.0), static_cast<double>(oracle), 1e-15);
    EXPECT_NEAR(bt_probability(1.0), 0.7310585786300049, 1e-15);
}

TEST(BtProbability, StableForHugeDeltas) {
    for (double d : {-1e4, -745.0, -40.0, 40.0, 745.0, 1e4}) {
        EXPECT_TRUE(std::isfinite(bt_probability(d)));
        EXPECT_TRUE(std::isfinite(log_bt_probability(d)));
    }
    EXPECT_NEAR(log_bt_probability(-1e4), -1e4, 1e-9);
    EXPECT_EQ(log_bt_probability(1e4), 0.0);
}

TEST(RouterForward, ZeroParamsGiveUniform) {
    for (std::size_t k : {1u, 2u, 5u}) {
        const auto r = RouterParams::zeros(3, 4, k);
        const auto w = router_forward(r, FeatureVector{0.3, -1.0, 2.0});
        for (double v : w) EXPECT_DOUBLE_EQ(v, 1.0 / static_cast<double>(k));
    }
}

TEST(RouterForward, LargeFirstBiasDominates) {
    for (std::size_t k = 2; k <= 5; ++k) {
        auto r = RouterParams::zeros(2, 3, k);
        r.output_bias[0] = 10.0;
        const auto w = router_forward(r, FeatureVector{1.0, 1.0});
        const double oracle = std::exp(10.0) / (std::exp(10.0) + static_cast<double>(k - 1));
        EXPECT_NEAR(w[0], oracle, 1e-12);
        EXPECT_GT(w[0], 0.999);
    }
}

TEST(RouterForward, SimplexOverRandomParameters) {
    for (std::uint64_t s = 0; s < 200; ++s) {
        const std::size_t k = 1 + s % 6;
        auto m = random_model(k, 2, 4, 8, s, 1.0, 3.0);
        Rng rng(s, {1});
        const auto w = router_forward(m.router, random_vector(rng, 4, 5.0));
        double sum = 0.0;
        for (double v : w) {
            EXPECT_GE(v, 0.0);
            sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(RouterForward, DimensionMismatch) {
    const auto r = RouterParams::zeros(3, 4, 2);
    EXPECT_THROW(router_forward(r, FeatureVector{1.0}), Error);
}

TEST(MixtureProbability, SingleHeadIsBitIdenticalToBt) {
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto m = random_model(1, 6, 3, 4, s);
        const auto batch = random_batch(5, 6, 3, s);
        for (const auto& ex : batch) {
            const double direct = bt_probability(head_reward(m.heads[0], ex.winner) - head_reward(m.heads[0], ex.loser));
            EXPECT_EQ(mixture_probability(m, ex), direct);
        }
    }
}

TEST(MixtureProbability, SymmetricAverageUnderUniformRouter) {
    MixtureModel m;
    const double d = std::log(9.0);  // sigma(d) = 0.9
    m.heads = {{{d}, 0.0}, {{-d}, 0.0}};
    m.router = RouterParams::zeros(1, 2, 2);
    PreferenceExample ex{{0.0}, {1.0}, {0.0}, {}, {}, {}};
    EXPECT_NEAR(mixture_probability(m, ex), 0.5, 1e-15);
}

TEST(MixtureProbability, MatchesBruteForceSum) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto m = random_model(3, 5, 4, 6, 100 + s);
        const auto ex = random_batch(1, 5, 4, 200 + s)[0];
        // independent forward pass
        std::vector<double> hidden(6), logits(3);
        for (int j = 0; j < 6; ++j) {
            double a = m.router.hidden_bias[j];
            for (int i = 0; i < 4; ++i) a += m.router.hidden_weights(j, i) * ex.prompt_ctx[i];
            hidden[j] = std::tanh(a);
        }
        double z = 0.0;
        for (int k = 0; k < 3; ++k) {
            double a = m.router.output_bias[k];
            for (int j = 0; j < 6; ++j) a += m.router.output_weights(k, j) * hidden[j];
            logits[k] = std::exp(a);
            z += logits[k];
        }
        double p = 0.0;
        for (int k = 0; k < 3; ++k) {
            double rw = m.heads[k].bias, rl = m.heads[k].bias;
            for (int i = 0; i < 5; ++i) {
                rw += m.heads[k].weights[i] * ex.winner[i];
                rl += m.heads[k].weights[i] * ex.loser[i];
            }
            p += logits[k] / z / (1.0 + std::exp(-(rw - rl)));
        }
        EXPECT_NEAR(mixture_probability(m, ex), p, 1e-12);
        EXPECT_NEAR(std::exp(log_mixture_probability(m, ex)), p, 1e-12);
    }
}

TEST(MixtureProbability, ComplementSymmetry) {
    for (std::uint64_t s = 0; s < 100; ++s) {
        const auto m = random_model(1 + s % 4, 4, 3, 5, s);
        auto ex = random_batch(1, 4, 3, s)[0];
        const double p = mixture_probability(m, ex);
        std::swap(ex.winner, ex.loser);
        EXPECT_NEAR(mixture_probability(m, ex), 1.0 - p, 1e-12);
        for (const auto& h : m.heads) {
            const double d = head_delta(h, ex);
            EXPECT_NEAR(bt_probability(d), 1.0 - bt_probability(-d), 1e-12);
        }
    }
}

TEST(MixtureProbability, RewardShiftInvariance) {
    for (std::uint64_t s = 0; s < 50; ++s) {
        auto m = random_model(3, 4, 3, 5, s);
        const auto batch = random_batch(16, 4, 3, s);
        const double before = total_loss(m, batch, 0.5);
        std::vector<double> p0;
        for (const auto& ex : batch) p0.push_back(mixture_probability(m, ex));
        m.heads[s % 3].bias += 17.25;
        EXPECT_NEAR(total_loss(m, batch, 0.5), before, 1e-12);
        for (std::size_t i = 0; i < batch.size(); ++i) EXPECT_NEAR(mixture_probability(m, batch[i]), p0[i], 1e-12);
    }
}

TEST(MixtureProbability, ModelAndExampleMismatch) {
    const auto m = random_model(2, 4, 3, 5, 1);
    auto ex = random_batch(1, 4, 3, 1)[0];
    ex.loser.pop_back();
    EXPECT_THROW(mixture_probability(m, ex), Error);
    auto ex2 = random_batch(1, 4, 2, 1)[0];
    EXPECT_THROW(mixture_probability(m, ex2), Error);
}

TEST(MleLoss, ConstantHalfProbabilityIsLn2) {
    MixtureModel m;
    m.heads = {{{0.0, 0.0}, 0.0}, {{0.0, 0.0}, 0.0}};
    m.router = RouterParams::zeros(2, 3, 2);
    const auto batch = random_batch(10, 2, 2, 3);
    EXPECT_NEAR(mle_loss(m, batch), std::log(2.0), 1e-15);
}

TEST(MleLoss, SingleExampleAtPointNine) {
    MixtureModel m;
    m.heads = {{{std::log(9.0)}, 0.0}};
    m.router = RouterParams::zeros(1, 1, 1);
    std::vector<PreferenceExample> batch{{{0.0}, {1.0}, {0.0}, {}, {}, {}}};
    EXPECT_NEAR(mle_loss(m, batch), -std::log(0.9), 1e-12);
    EXPECT_NEAR(mle_loss(m, batch), 0.10536051565782628, 1e-12);
}

TEST(MleLoss, RepetitionLeavesMeanUnchanged) {
    const auto m = random_model(3, 4, 3, 5, 9);
    auto batch = random_batch(7, 4, 3, 9);
    const double once = mle_loss(m, batch);
    const auto copy = batch;
    batch.insert(batch.end(), copy.begin(), copy.end());
    EXPECT_NEAR(mle_loss(m, batch), once, 1e-12);
}

TEST(MleLoss, EmptyBatchThrows) {
    const auto m = random_model(2, 4, 3, 5, 9);
    const std::vector<PreferenceExample> empty;
    EXPECT_THROW(mle_loss(m, empty), Error);
    EXPECT_THROW(reg_loss(m, empty), Error);
}

TEST(MleLoss, FiniteAtExtremeDeltas) {
    MixtureModel m;
    m.heads = {{{1e4}, 0.0}, {{-1e4}, 0.0}};
    m.router = RouterParams::zeros(1, 2, 2);
    m.router.output_bias = {40.0, -40.0};
    std::vector<PreferenceExample> batch{{{0.0}, {-1.0}, {0.0}, {}, {}, {}}, {{0.0}, {1.0}, {0.0}, {}, {}, {}}};
    EXPECT_TRUE(std::isfinite(mle_loss(m, batch)));
    EXPECT_TRUE(std::isfinite(total_loss(m, batch, 0.5)));
}

TEST(RegLoss, UniformRouterIsMinusLogK) {
    MixtureModel m;
    for (int k = 0; k < 4; ++k) m.heads.push_back({{0.1}, 0.0});
    m.router = RouterParams::zeros(2, 3, 4);
    const auto batch = random_batch(5, 1, 2, 1);
    EXPECT_NEAR(reg_loss(m, batch), -std::log(4.0), 1e-12);
}

TEST(RegLoss, NearlyOneHotIsNearZero) {
    MixtureModel m;
    for (int k = 0; k < 3; ++k) m.heads.push_back({{0.1}, 0.0});
    m.router = RouterParams::zeros(2, 3, 3);
    m.router.output_bias = {60.0, 0.0, 0.0};
    const auto batch = random_batch(5, 1, 2, 1);
    EXPECT_NEAR(reg_loss(m, batch), 0.0, 1e-20);
    EXPECT_LE(reg_loss(m, batch), 0.0);
}

TEST(RegLoss, EntropyBound) {
    for (std::uint64_t s = 0; s < 100; ++s) {
        const std::size_t k = 1 + s % 5;
        const auto m = random_model(k, 3, 3, 4, s, 1.0, 2.0);
        const auto batch = random_batch(8, 3, 3, s);
        const double r = reg_loss(m, batch);
        EXPECT_GE(r, -std::log(static_cast<double>(k)) - 1e-9);
        EXPECT_LE(r, 1e-15);
    }
}

TEST(TotalLoss, AffineInAlpha) {
    const auto m = random_model(3, 4, 3, 5, 12);
    const auto batch = random_batch(9, 4, 3, 12);
    const double mle = mle_loss(m, batch), reg = reg_loss(m, batch);
    EXPECT_EQ(total_loss(m, batch, 0.0), mle);
    EXPECT_NEAR(total_loss(m, batch, 0.5), mle + 0.5 * reg, 1e-15);
    EXPECT_NEAR(total_loss(m, batch, 2.0) - total_loss(m, batch, 0.5), 1.5 * reg, 1e-12);
    EXPECT_THROW(total_loss(m, batch, -0.1), Error);
}

TEST(Entropy, Basics) {
    EXPECT_EQ(entropy(std::vector<double>{1.0, 0.0}), 0.0);
    EXPECT_NEAR(entropy(std::vector<double>{0.5, 0.5}), std::log(2.0), 1e-15);
}

TEST(MixtureModel, ValidateCatchesInconsistentShapes) {
    auto m = random_model(2, 4, 3, 5, 1);
    EXPECT_NO_THROW(m.validate());
    m.heads.push_back(m.heads[0]);
    EXPECT_THROW(m.validate(), Error);
    auto m2 = random_model(2, 4, 3, 5, 1);
    m2.heads[1].weights.push_back(0.0);
    EXPECT_THROW(m2.validate(), Error);
    auto m3 = random_model(2, 4, 3, 5, 1);
    m3.router.hidden_bias.pop_back();
    EXPECT_THROW(m3.validate(), Error);
}
