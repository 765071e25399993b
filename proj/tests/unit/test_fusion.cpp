#include <dualconf/fusion.hpp>

#include <gtest/gtest.h>

#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <random>

using namespace dualconf;

namespace {

FitConfig no_decay() {
    FitConfig c;
    c.weight_decay = 0.0;
    return c;
}

} // namespace

TEST(HeadLogit, Examples) {
    auto p = FusionParameters::zeros(5);
    const std::vector<double> zero(5, 0.0);
    EXPECT_EQ(head_logit(zero, p), 0.0);
    const std::vector<double> e0{1, 0, 0, 0, 0};
    EXPECT_NEAR(head_logit(e0, p), std::log(2.0), 1e-15);

    p.w_raw = {0.3, -1.0, 2.0, 0.1, -0.2};
    p.bias = -0.4;
    std::vector<double> phi{0.5, -1.0, 0.25, 0.0, 1.5};
    const double base = head_logit(phi, p);
    phi[2] += 0.1;
    EXPECT_NEAR(head_logit(phi, p) - base, 0.1 * softplus(2.0), 1e-14);
    EXPECT_THROW(head_logit(std::vector<double>{1.0}, p), UsageError);
}

TEST(PredictProb, Examples) {
    auto p = FusionParameters::zeros(1);
    EXPECT_EQ(predict_prob(std::vector<double>{0.0}, p), 0.5);
    p.bias = std::log(4.0);
    EXPECT_NEAR(predict_prob(std::vector<double>{0.0}, p), 0.8, 1e-15);
}

TEST(EffectiveWeights, StrictlyPositive) {
    for (double w = -700.0; w <= 50.0; w += 0.25) {
        FusionParameters p{0.0, {w}};
        ASSERT_GT(p.effective_weights()[0], 0.0) << w;
    }
    EXPECT_NEAR(FusionParameters::zeros(3).effective_weights()[1], std::log(2.0), 1e-15);
}

TEST(PredictProb, MonotoneInEveryCoordinate) {
    std::mt19937_64 rng(101);
    std::normal_distribution<double> n(0.0, 2.0);
    std::exponential_distribution<double> step(1.0);
    std::uniform_int_distribution<std::size_t> coord(0, 4);
    for (int trial = 0; trial < 10000; ++trial) {
        FusionParameters p{n(rng), std::vector<double>(5)};
        std::vector<double> phi(5);
        for (std::size_t j = 0; j < 5; ++j) {
            p.w_raw[j] = n(rng);
            phi[j] = n(rng);
        }
        auto bumped = phi;
        bumped[coord(rng)] += step(rng) * std::pow(10.0, -static_cast<double>(trial % 12));
        ASSERT_GE(predict_prob(bumped, p), predict_prob(phi, p));
    }
}

TEST(Nll, CoinFlip) {
    const std::vector<std::vector<double>> rows{{0.0}};
    const std::vector<int> y{1};
    const auto lg = nll_and_gradient(FusionParameters::zeros(1), rows, y);
    EXPECT_NEAR(lg.nll, std::log(2.0), 1e-15);
    EXPECT_NEAR(lg.grad_bias, -0.5, 1e-15);
    EXPECT_THROW(nll_and_gradient(FusionParameters::zeros(1), std::vector<std::vector<double>>{}, std::vector<int>{}),
                 FitError);
}

TEST(Nll, ObjectiveMatchesReference) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        auto data = oracle::logistic_data(rng, 30, 5, n(rng), 1.0);
        FusionParameters p{n(rng), {n(rng), n(rng), n(rng), n(rng), n(rng)}};
        const double wd = 0.01 * (trial % 3);
        const auto lg = nll_and_gradient(p, data.rows, data.labels, wd);
        ASSERT_NEAR(lg.objective, static_cast<double>(oracle::penalized_nll(p.bias, p.w_raw, data.rows, data.labels, wd)), 1e-12);
        ASSERT_NEAR(lg.nll, mean_nll(data.rows, data.labels, p), 1e-12);
    }
}

TEST(Nll, GradientMatchesCentralDifferences) {
    std::mt19937_64 rng(2024);
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> size(1, 40);
    const double h = 1e-5;
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        auto data = oracle::logistic_data(rng, size(rng), 5, n(rng), 0.7);
        FusionParameters p{0.5 * n(rng), {n(rng), n(rng), n(rng), n(rng), n(rng)}};
        const double wd = trial % 2 == 0 ? 0.0 : 1e-2;
        const auto lg = nll_and_gradient(p, data.rows, data.labels, wd);
        for (std::size_t j = 0; j <= 5; ++j) {
            auto plus = p, minus = p;
            double& a = j == 0 ? plus.bias : plus.w_raw[j - 1];
            double& b = j == 0 ? minus.bias : minus.w_raw[j - 1];
            a += h;
            b -= h;
            const double numeric = static_cast<double>(
                (oracle::penalized_nll(plus.bias, plus.w_raw, data.rows, data.labels, wd) -
                 oracle::penalized_nll(minus.bias, minus.w_raw, data.rows, data.labels, wd)) /
                (2.0L * h));
            const double analytic = j == 0 ? lg.grad_bias : lg.grad_w_raw[j - 1];
            const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-300});
            worst = std::max(worst, rel);
            ASSERT_LE(rel, 1e-6) << "trial " << trial << " param " << j << " analytic " << analytic << " numeric "
                                 << numeric;
        }
    }
    RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(FitHead, SeparatedDataLossShrinks) {
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) {
        const double x = (i % 2 == 0 ? 1.0 : -1.0) * (0.5 + 0.05 * i);
        rows.push_back({x});
        labels.push_back(x > 0 ? 1 : 0);
    }
    double previous = std::log(2.0);
    for (std::size_t iters : {50u, 200u, 1000u, 4000u}) {
        auto cfg = no_decay();
        cfg.max_iters = iters;
        const auto fit = fit_head(rows, labels, {}, {}, cfg);
        const double loss = mean_nll(rows, labels, fit.params);
        EXPECT_LT(loss, previous) << iters;
        previous = loss;
    }
    EXPECT_LT(previous, 0.01);
}

TEST(FitHead, AllPositiveLabels) {
    std::mt19937_64 rng(5);
    auto data = oracle::logistic_data(rng, 100, 5, 0.0, 1.0);
    std::fill(data.labels.begin(), data.labels.end(), 1);
    double previous = mean_nll(data.rows, data.labels, FusionParameters::zeros(5));
    for (std::size_t iters = 1; iters <= 20; ++iters) {
        FitConfig cfg;
        cfg.max_iters = iters;
        const auto fit = fit_head(data.rows, data.labels, {}, {}, cfg);
        const double loss = mean_nll(data.rows, data.labels, fit.params);
        EXPECT_LT(loss, previous) << iters;
        previous = loss;
    }
    const auto fit = fit_head(data.rows, data.labels, {}, {}, FitConfig{});
    for (const auto& r : data.rows) {
        EXPECT_GT(predict_prob(r, fit.params), 0.95);
    }
}

TEST(FitHead, RowOrderDoesNotChangeParameters) {
    std::mt19937_64 rng(77);
    auto cal = oracle::logistic_data(rng, 300, 5, 0.3, 0.8);
    auto val = oracle::logistic_data(rng, 100, 5, 0.3, 0.8);
    const auto reference = fit_head(cal.rows, cal.labels, val.rows, val.labels, FitConfig{});
    for (int trial = 0; trial < 3; ++trial) {
        std::vector<std::size_t> perm(cal.rows.size());
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        oracle::Dataset shuffled;
        for (std::size_t i : perm) {
            shuffled.rows.push_back(cal.rows[i]);
            shuffled.labels.push_back(cal.labels[i]);
        }
        std::vector<std::size_t> vperm(val.rows.size());
        std::iota(vperm.begin(), vperm.end(), 0);
        std::shuffle(vperm.begin(), vperm.end(), rng);
        oracle::Dataset vshuffled;
        for (std::size_t i : vperm) {
            vshuffled.rows.push_back(val.rows[i]);
            vshuffled.labels.push_back(val.labels[i]);
        }
        const auto fit = fit_head(shuffled.rows, shuffled.labels, vshuffled.rows, vshuffled.labels, FitConfig{});
        EXPECT_EQ(fit.params, reference.params);
        EXPECT_EQ(fit.iterations, reference.iterations);
    }
}

TEST(FitHead, OneDimensionalMatchesLogisticOracle) {
    std::mt19937_64 rng(31337);
    std::uniform_real_distribution<double> bias(-1.0, 1.0);
    std::uniform_real_distribution<double> slope(0.5, 2.0);
    for (int trial = 0; trial < 10; ++trial) {
        const auto data = oracle::logistic_data(rng, 500, 1, bias(rng), slope(rng));
        std::vector<double> x;
        for (const auto& r : data.rows) {
            x.push_back(r[0]);
        }
        const auto ref = oracle::irls_logistic(x, data.labels);
        ASSERT_GT(ref.slope, 0.0);
        const auto fit = fit_head(data.rows, data.labels, {}, {}, FitConfig{});
        double mad = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            mad += std::abs(predict_prob(data.rows[i], fit.params) - ref.prob(x[i]));
        }
        mad /= static_cast<double>(x.size());
        EXPECT_LT(mad, 1e-3) << "trial " << trial;
    }
}

TEST(FitHead, EarlyStoppingReturnsBestValidationParameters) {
    std::mt19937_64 rng(9);
    auto cal = oracle::logistic_data(rng, 200, 2, 0.0, 1.5);
    auto val = cal;
    // Validation labels disagree with calibration, so validation NLL rises quickly.
    for (int& y : val.labels) {
        y = 1 - y;
    }
    FitConfig cfg;
    cfg.patience = 10;
    const auto fit = fit_head(cal.rows, cal.labels, val.rows, val.labels, cfg);
    EXPECT_LT(fit.iterations, cfg.max_iters);
    EXPECT_EQ(fit.iterations, fit.best_iteration + cfg.patience);
    EXPECT_DOUBLE_EQ(fit.best_nll, mean_nll(val.rows, val.labels, fit.params));
}

TEST(FitHead, DisabledEarlyStoppingIgnoresValidation) {
    std::mt19937_64 rng(10);
    const auto cal = oracle::logistic_data(rng, 150, 3, 0.2, 1.0);
    const auto val = oracle::logistic_data(rng, 50, 3, -1.0, -1.0);
    FitConfig cfg;
    cfg.max_iters = 300;
    cfg.early_stopping = false;
    const auto with_val = fit_head(cal.rows, cal.labels, val.rows, val.labels, cfg);
    const auto without = fit_head(cal.rows, cal.labels, {}, {}, cfg);
    EXPECT_EQ(with_val.params, without.params);
    EXPECT_EQ(with_val.iterations, cfg.max_iters);
}

TEST(FitHead, NonFiniteLossReportsIteration) {
    std::vector<std::vector<double>> rows{{1.0}, {std::nan("")}};
    std::vector<int> labels{1, 0};
    try {
        fit_head(rows, labels, {}, {}, FitConfig{});
        FAIL() << "expected ConvergenceError";
    } catch (const ConvergenceError& e) {
        EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos);
    }
}

TEST(FitHead, ConfigurationErrors) {
    const std::vector<std::vector<double>> rows{{1.0}};
    const std::vector<int> labels{1};
    FitConfig bad;
    bad.learning_rate = 0;
    EXPECT_THROW(fit_head(rows, labels, {}, {}, bad), ConfigError);
    bad = {};
    bad.max_iters = 0;
    EXPECT_THROW(fit_head(rows, labels, {}, {}, bad), ConfigError);
    bad = {};
    bad.patience = 0;
    EXPECT_THROW(fit_head(rows, labels, {}, {}, bad), ConfigError);
    EXPECT_THROW(fit_head(std::vector<std::vector<double>>{}, std::vector<int>{}, {}, {}, FitConfig{}), FitError);
}
