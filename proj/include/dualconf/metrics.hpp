#pragma once

// Calibration and failure-prediction metrics over (confidence, correctness) pairs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dualconf/error.hpp"

namespace dualconf {

struct ReliabilityBin {
    double lower = 0.0;
    double upper = 0.0;
    std::size_t count = 0;
    // Unset for empty bins.
    std::optional<double> mean_confidence;
    std::optional<double> empirical_accuracy;

    friend bool operator==(const ReliabilityBin&, const ReliabilityBin&) = default;
};

struct RiskCoveragePoint {
    double coverage = 0.0;
    double risk = 0.0;

    friend bool operator==(const RiskCoveragePoint&, const RiskCoveragePoint&) = default;
};

namespace detail {

inline void check_pairs(std::span<const double> conf, std::span<const int> correct, const char* what) {
    if (conf.empty()) {
        throw UsageError(std::string(what) + ": empty input");
    }
    if (conf.size() != correct.size()) {
        throw UsageError(std::string(what) + ": confidence and correctness lengths differ");
    }
}

// Indices sorted by descending confidence, ties by ascending index.
inline std::vector<std::size_t> descending_order(std::span<const double> conf) {
    std::vector<std::size_t> idx(conf.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return conf[a] > conf[b]; });
    return idx;
}

} // namespace detail

inline double accuracy(std::span<const int> correct) {
    if (correct.empty()) {
        throw UsageError("accuracy: empty input");
    }
    std::size_t hits = 0;
    for (int c : correct) {
        hits += c != 0 ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(correct.size());
}

// Equal-width bins over [0,1]; value c lands in bin floor(c * n_bins), with 1.0 in the last bin.
inline std::size_t bin_index(double c, std::size_t n_bins) {
    const double clamped = std::clamp(c, 0.0, 1.0);
    return std::min(static_cast<std::size_t>(clamped * static_cast<double>(n_bins)), n_bins - 1);
}

inline std::vector<ReliabilityBin> reliability_bins(std::span<const double> conf, std::span<const int> correct,
                                                    std::size_t n_bins = 10) {
    detail::check_pairs(conf, correct, "reliability_bins");
    if (n_bins < 1) {
        throw UsageError("reliability_bins: need at least one bin");
    }
    std::vector<double> conf_sum(n_bins, 0.0);
    std::vector<std::size_t> hits(n_bins, 0);
    std::vector<ReliabilityBin> bins(n_bins);
    for (std::size_t b = 0; b < n_bins; ++b) {
        bins[b].lower = static_cast<double>(b) / static_cast<double>(n_bins);
        bins[b].upper = static_cast<double>(b + 1) / static_cast<double>(n_bins);
    }
    for (std::size_t i = 0; i < conf.size(); ++i) {
        if (!(conf[i] >= 0.0 && conf[i] <= 1.0)) {
            throw UsageError("reliability_bins: confidence outside [0,1]");
        }
        const std::size_t b = bin_index(conf[i], n_bins);
        ++bins[b].count;
        conf_sum[b] += conf[i];
        hits[b] += correct[i] != 0 ? 1 : 0;
    }
    for (std::size_t b = 0; b < n_bins; ++b) {
        if (bins[b].count > 0) {
            const double n = static_cast<double>(bins[b].count);
            bins[b].mean_confidence = conf_sum[b] / n;
            bins[b].empirical_accuracy = static_cast<double>(hits[b]) / n;
        }
    }
    return bins;
}

inline double ece_from_bins(std::span<const ReliabilityBin> bins, std::size_t n) {
    double total = 0.0;
    for (const auto& b : bins) {
        if (b.count > 0) {
            total += static_cast<double>(b.count) / static_cast<double>(n) *
                     std::abs(*b.mean_confidence - *b.empirical_accuracy);
        }
    }
    return total;
}

inline double ece(std::span<const double> conf, std::span<const int> correct, std::size_t n_bins = 10) {
    const auto bins = reliability_bins(conf, correct, n_bins);
    return ece_from_bins(bins, conf.size());
}

// Mann-Whitney AUROC with half credit for tied scores; unset when only one class is present.
inline std::optional<double> auroc(std::span<const double> conf, std::span<const int> correct) {
    detail::check_pairs(conf, correct, "auroc");
    const auto order = detail::descending_order(conf);
    std::uint64_t positives = 0;
    std::uint64_t negatives = 0;
    for (int c : correct) {
        (c != 0 ? positives : negatives) += 1;
    }
    if (positives == 0 || negatives == 0) {
        return std::nullopt;
    }
    // Twice the concordant-pair count, accumulated exactly in integers. Walking
    // from the highest score down, each positive beats every negative seen later.
    std::uint64_t twice_concordant = 0;
    std::uint64_t negatives_below = negatives;
    for (std::size_t start = 0; start < order.size();) {
        std::size_t end = start;
        std::uint64_t pos_group = 0;
        std::uint64_t neg_group = 0;
        while (end < order.size() && conf[order[end]] == conf[order[start]]) {
            (correct[order[end]] != 0 ? pos_group : neg_group) += 1;
            ++end;
        }
        negatives_below -= neg_group;
        twice_concordant += 2 * pos_group * negatives_below + pos_group * neg_group;
        start = end;
    }
    return static_cast<double>(twice_concordant) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
}

// Average precision over the descending ranking; unset without positives.
inline std::optional<double> auprc(std::span<const double> conf, std::span<const int> correct) {
    detail::check_pairs(conf, correct, "auprc");
    const auto order = detail::descending_order(conf);
    std::size_t hits = 0;
    double precision_sum = 0.0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        if (correct[order[rank]] != 0) {
            ++hits;
            precision_sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
        }
    }
    if (hits == 0) {
        return std::nullopt;
    }
    return precision_sum / static_cast<double>(hits);
}

// (AP - prevalence) / (1 - prevalence); negative when confidence anti-ranks
// correctness. Unset without positives or without negatives.
inline std::optional<double> auprc_n(std::span<const double> conf, std::span<const int> correct) {
    const auto ap = auprc(conf, correct);
    const double prevalence = accuracy(correct);
    if (!ap || prevalence >= 1.0) {
        return std::nullopt;
    }
    return (*ap - prevalence) / (1.0 - prevalence);
}

// One point per coverage k/n, k = 1..n, over the descending-confidence ranking.
inline std::vector<RiskCoveragePoint> risk_coverage(std::span<const double> conf, std::span<const int> correct) {
    detail::check_pairs(conf, correct, "risk_coverage");
    const auto order = detail::descending_order(conf);
    const double n = static_cast<double>(order.size());
    std::vector<RiskCoveragePoint> points;
    points.reserve(order.size());
    std::size_t errors = 0;
    for (std::size_t k = 1; k <= order.size(); ++k) {
        errors += correct[order[k - 1]] != 0 ? 0 : 1;
        points.push_back({static_cast<double>(k) / n, static_cast<double>(errors) / static_cast<double>(k)});
    }
    return points;
}

namespace detail {

// AURC of a curve on the grid coverage = k/n, risk = e_k/k, as one rounding
// of the exact rational. Returns nullopt off the grid or when the common
// denominator 2 n lcm(1..n) does not fit in 53 bits.
inline std::optional<double> exact_grid_aurc(std::span<const RiskCoveragePoint> points) {
    constexpr std::uint64_t kExact = std::uint64_t{1} << 53;
    const std::uint64_t n = points.size();
    std::uint64_t lcm = 1;
    for (std::uint64_t k = 1; k <= n; ++k) {
        lcm = std::lcm(lcm, k);
        if (lcm > kExact / (2 * n)) {
            return std::nullopt;
        }
    }
    // area = (1 / 2n) * [2 r_1 + sum_{k<n} (r_k + r_{k+1})]
    std::uint64_t numerator = 0;
    for (std::uint64_t k = 1; k <= n; ++k) {
        const auto& p = points[k - 1];
        const double scaled = p.risk * static_cast<double>(k);
        const double e = std::round(scaled);
        if (p.coverage != static_cast<double>(k) / static_cast<double>(n) || std::abs(scaled - e) > 1e-9 || e < 0) {
            return std::nullopt;
        }
        const std::uint64_t weight = (k == 1 ? 2 : 0) + (k < n ? 1 : 0) + (k > 1 ? 1 : 0);
        numerator += weight * static_cast<std::uint64_t>(e) * (lcm / k);
    }
    const std::uint64_t denominator = 2 * n * lcm;
    if (numerator > kExact) {
        return std::nullopt;
    }
    return static_cast<double>(numerator) / static_cast<double>(denominator);
}

} // namespace detail

// Trapezoid over consecutive points plus a rectangle of width coverage[0]
// at height risk[0] on the left edge.
inline double aurc(std::span<const RiskCoveragePoint> points) {
    if (points.empty()) {
        throw UsageError("aurc: empty risk-coverage curve");
    }
    if (const auto exact = detail::exact_grid_aurc(points)) {
        return *exact;
    }
    double area = points.front().coverage * points.front().risk;
    for (std::size_t i = 1; i < points.size(); ++i) {
        area += (points[i].coverage - points[i - 1].coverage) * (points[i].risk + points[i - 1].risk) / 2.0;
    }
    return area;
}

} // namespace dualconf
