#include <dualconf/metrics.hpp>

#include <gtest/gtest.h>

#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace dualconf;

namespace {

const std::vector<double> kScores{0.9, 0.8, 0.7, 0.6};
const std::vector<int> kLabels{1, 1, 0, 1};

} // namespace

TEST(Accuracy, Examples) {
    EXPECT_EQ(accuracy(std::vector<int>{1, 1, 0, 1}), 0.75);
    EXPECT_EQ(accuracy(std::vector<int>{0, 0, 0}), 0.0);
    EXPECT_THROW(accuracy(std::vector<int>{}), UsageError);
}

TEST(Accuracy, MatchesFullCoverageRisk) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> c(1 + trial);
        std::vector<int> y(c.size());
        for (std::size_t i = 0; i < c.size(); ++i) {
            c[i] = u(rng);
            y[i] = u(rng) < 0.7;
        }
        const auto rc = risk_coverage(c, y);
        ASSERT_NEAR(accuracy(y), 1.0 - rc.back().risk, 1e-15);
        ASSERT_EQ(rc.back().coverage, 1.0);
    }
}

TEST(Ece, Examples) {
    const std::vector<double> ones(10, 1.0);
    const std::vector<int> eighty{1, 1, 1, 1, 1, 1, 1, 1, 0, 0};
    EXPECT_NEAR(ece(ones, eighty), 0.2, 1e-15);

    const std::vector<double> at_acc(10, 0.8);
    EXPECT_NEAR(ece(at_acc, eighty), 0.0, 1e-15);
    EXPECT_THROW(ece(std::vector<double>{}, std::vector<int>{}), UsageError);
    EXPECT_THROW(ece(std::vector<double>{1.5}, std::vector<int>{1}), UsageError);
}

TEST(Ece, MonteCarloCalibratedIsSmall) {
    std::mt19937_64 rng(2718);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> c(100000);
    std::vector<int> y(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] = u(rng);
        y[i] = u(rng) < c[i] ? 1 : 0;
    }
    EXPECT_LT(ece(c, y), 0.01);
    EXPECT_NEAR(ece(c, y), oracle::reference_ece(c, y, 10), 1e-12);
}

TEST(ReliabilityBins, PartitionAndEndpoints) {
    const std::vector<double> c{0.0, 0.1, 0.15, 0.5, 0.99, 1.0, 1.0};
    const std::vector<int> y{0, 0, 1, 1, 1, 1, 0};
    const auto bins = reliability_bins(c, y, 10);
    ASSERT_EQ(bins.size(), 10u);
    std::size_t total = 0;
    for (std::size_t b = 0; b < bins.size(); ++b) {
        EXPECT_NEAR(bins[b].lower, b / 10.0, 1e-15);
        EXPECT_NEAR(bins[b].upper, (b + 1) / 10.0, 1e-15);
        total += bins[b].count;
        EXPECT_EQ(bins[b].count == 0, !bins[b].mean_confidence.has_value());
    }
    EXPECT_EQ(total, c.size());
    EXPECT_EQ(bins[0].count, 1u);
    EXPECT_EQ(bins[1].count, 2u);
    EXPECT_EQ(bins[9].count, 3u);
    EXPECT_EQ(bin_index(1.0, 10), 9u);
    EXPECT_EQ(bin_index(0.0, 10), 0u);

    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> many(5000);
    std::vector<int> labels(5000, 1);
    for (double& v : many) {
        v = u(rng);
    }
    for (std::size_t n_bins : {1u, 7u, 10u, 15u}) {
        std::size_t sum = 0;
        for (const auto& b : reliability_bins(many, labels, n_bins)) {
            sum += b.count;
        }
        EXPECT_EQ(sum, many.size());
    }
}

TEST(Auroc, Examples) {
    EXPECT_NEAR(*auroc(kScores, kLabels), 2.0 / 3.0, 1e-15);
    EXPECT_EQ(*auroc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, std::vector<int>{1, 1, 0, 0}), 1.0);
    EXPECT_EQ(*auroc(std::vector<double>(6, 0.4), std::vector<int>{1, 0, 1, 0, 0, 1}), 0.5);
    EXPECT_FALSE(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}).has_value());
    EXPECT_FALSE(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 0}).has_value());
}

TEST(Auroc, MatchesPairCounting) {
    std::mt19937_64 rng(6);
    std::uniform_int_distribution<int> level(0, 9);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 2 + trial % 199;
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = level(rng) / 10.0;  // coarse grid forces ties
            y[i] = level(rng) < 6;
        }
        y[0] = 1;
        y[1] = 0;
        ASSERT_NEAR(*auroc(s, y), oracle::brute_force_auroc(s, y), 1e-12);
    }
}

TEST(Auprc, Examples) {
    EXPECT_NEAR(*auprc(kScores, kLabels), (1 + 1 + 0.75) / 3, 1e-15);
    EXPECT_NEAR(*auprc(kScores, kLabels), 0.91667, 1e-5);
    EXPECT_NEAR(*auprc_n(kScores, kLabels), 0.66667, 1e-5);
    EXPECT_FALSE(auprc(std::vector<double>{0.3}, std::vector<int>{0}).has_value());
    EXPECT_FALSE(auprc_n(std::vector<double>{0.3, 0.4}, std::vector<int>{1, 1}).has_value());
    // Anti-ranking drives the normalized value below zero.
    const auto anti = auprc_n(std::vector<double>{0.9, 0.8, 0.3, 0.2}, std::vector<int>{0, 0, 1, 1});
    ASSERT_TRUE(anti.has_value());
    EXPECT_LT(*anti, 0.0);
}

TEST(Auprc, MatchesDefinition) {
    std::mt19937_64 rng(60);
    std::uniform_int_distribution<int> level(0, 19);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + trial % 100;
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = level(rng) / 19.0;
            y[i] = level(rng) < 8;
        }
        y[0] = 1;
        ASSERT_NEAR(*auprc(s, y), oracle::average_precision(s, y), 1e-12);
    }
}

TEST(RiskCoverage, Example) {
    const auto rc = risk_coverage(std::vector<double>{0.9, 0.6}, std::vector<int>{1, 0});
    ASSERT_EQ(rc.size(), 2u);
    EXPECT_EQ(rc[0].coverage, 0.5);
    EXPECT_EQ(rc[0].risk, 0.0);
    EXPECT_EQ(rc[1].coverage, 1.0);
    EXPECT_EQ(rc[1].risk, 0.5);
    EXPECT_EQ(aurc(rc), 0.125);
}

TEST(RiskCoverage, AllCorrectHasZeroRisk) {
    const std::vector<double> c{0.3, 0.9, 0.5};
    const auto rc = risk_coverage(c, std::vector<int>{1, 1, 1});
    for (const auto& p : rc) {
        EXPECT_EQ(p.risk, 0.0);
    }
    EXPECT_EQ(aurc(rc), 0.0);
}

TEST(RiskCoverage, StableTieOrder) {
    // Equal confidences keep input order: the error at index 0 is accepted first.
    const auto rc = risk_coverage(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 1});
    EXPECT_EQ(rc[0].risk, 1.0);
    EXPECT_EQ(rc[1].risk, 0.5);
}

TEST(Aurc, ExhaustiveSmallInstancesMatchRationalEnumeration) {
    for (std::size_t n = 1; n <= 6; ++n) {
        for (std::size_t mask = 0; mask < (1u << n); ++mask) {
            std::vector<int> y(n);
            for (std::size_t i = 0; i < n; ++i) {
                y[i] = (mask >> i) & 1u;
            }
            // Strictly decreasing confidences: acceptance order is input order.
            std::vector<double> c(n);
            for (std::size_t i = 0; i < n; ++i) {
                c[i] = 1.0 - static_cast<double>(i) / 8.0;
            }
            const double got = aurc(risk_coverage(c, y));
            ASSERT_EQ(got, oracle::enumerated_aurc(y).value()) << "n=" << n << " mask=" << mask;
        }
    }
}

TEST(Aurc, OracleOrderingIsMinimal) {
    for (std::size_t n = 1; n <= 6; ++n) {
        for (std::size_t ones = 0; ones <= n; ++ones) {
            std::vector<int> y(n, 0);
            std::fill(y.begin(), y.begin() + ones, 1);
            const auto best = oracle::enumerated_aurc(y);  // all correct first
            std::vector<int> perm = y;
            std::sort(perm.begin(), perm.end());
            do {
                ASSERT_GE(oracle::enumerated_aurc(perm), best);
            } while (std::next_permutation(perm.begin(), perm.end()));
        }
    }
}

TEST(Aurc, TrapezoidCloseToPointAverage) {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + trial;
        std::vector<double> c(n);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            c[i] = u(rng);
            y[i] = u(rng) < 0.6;
        }
        const auto rc = risk_coverage(c, y);
        double direct = 0;
        for (const auto& p : rc) {
            direct += p.risk;
        }
        direct /= static_cast<double>(n);
        ASSERT_LE(std::abs(aurc(rc) - direct), 1.0 / (2.0 * n) + 1e-15);
        ASSERT_GE(aurc(rc), 0.0);
        ASSERT_LE(aurc(rc), 1.0);
    }
}

TEST(RankingMetrics, InvariantUnderIncreasingMaps) {
    std::mt19937_64 rng(909);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> c(400);
    std::vector<int> y(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] = std::round(u(rng) * 50) / 50;
        y[i] = u(rng) < c[i];
    }
    const auto roc = auroc(c, y);
    const auto ap = auprc(c, y);
    const auto apn = auprc_n(c, y);
    const double area = aurc(risk_coverage(c, y));
    bool ece_changed = false;
    for (int trial = 0; trial < 50; ++trial) {
        const double a = 0.2 + 3 * u(rng);
        std::vector<double> m(c.size());
        for (std::size_t i = 0; i < c.size(); ++i) {
            m[i] = std::pow(c[i], a);
        }
        ASSERT_EQ(auroc(m, y), roc);
        ASSERT_EQ(auprc(m, y), ap);
        ASSERT_EQ(auprc_n(m, y), apn);
        ASSERT_EQ(aurc(risk_coverage(m, y)), area);
        ece_changed = ece_changed || ece(m, y) != ece(c, y);
    }
    EXPECT_TRUE(ece_changed);
}

TEST(Ece, NotInvariantUnderIncreasingMaps) {
    // Calibrated at 0.5; squaring keeps the ranking but breaks calibration.
    const std::vector<double> c{0.5, 0.5, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9};
    const std::vector<int> y{1, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0};
    std::vector<double> sq;
    for (double v : c) {
        sq.push_back(v * v);
    }
    EXPECT_EQ(auroc(c, y), auroc(sq, y));
    EXPECT_NEAR(ece(c, y), 0.0, 1e-12);
    EXPECT_GT(ece(sq, y), 0.05);
}
