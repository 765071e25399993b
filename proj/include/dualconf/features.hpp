#pragma once

// Cross-channel consistency kernel, scalar reliability signals, the
// five-dimensional descriptor and its standardizer.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "dualconf/error.hpp"
#include "dualconf/records.hpp"

namespace dualconf {

inline constexpr std::size_t kDescriptorDim = 5;

struct FeatureHyperParams {
    double epsilon = 1e-6;
    double gamma = 2.0;
    double tau = 0.25;

    void validate() const {
        if (!(epsilon > 0.0 && epsilon < 0.5)) {
            throw ConfigError("epsilon must lie in (0, 0.5)");
        }
        if (!(gamma > 0.0)) {
            throw ConfigError("gamma must be positive");
        }
        if (!(tau > 0.0)) {
            throw ConfigError("tau must be positive");
        }
    }
};

// Which descriptor coordinates feed the head. token_only is the one-dimensional
// logistic (Platt) special case.
enum class FeatureSet { full, token_only };

inline const char* to_string(FeatureSet f) { return f == FeatureSet::full ? "full" : "token_only"; }

inline FeatureSet feature_set_from_string(const std::string& s) {
    if (s == "full") {
        return FeatureSet::full;
    }
    if (s == "token_only") {
        return FeatureSet::token_only;
    }
    throw ConfigError("unknown feature set '" + s + "' (expected full or token_only)");
}

inline std::size_t feature_dim(FeatureSet f) { return f == FeatureSet::full ? kDescriptorDim : 1; }

inline double clipped_log_odds(double z, double epsilon) {
    const double c = std::clamp(z, epsilon, 1.0 - epsilon);
    return std::log(c / (1.0 - c));
}

// RBF similarity exp(-|p - s|^gamma / tau), in (0, 1].
inline double consistency(double p, double s, double gamma, double tau) {
    return std::exp(-std::pow(std::abs(p - s), gamma) / tau);
}

inline double top2_margin(std::span<const double> p) {
    if (p.size() < 2) {
        throw UsageError("top2_margin: need at least 2 entries");
    }
    double first = -std::numeric_limits<double>::infinity();
    double second = -std::numeric_limits<double>::infinity();
    for (double v : p) {
        if (v > first) {
            second = first;
            first = v;
        } else if (v > second) {
            second = v;
        }
    }
    return first - second;
}

// Natural-log entropy with 0 log 0 = 0.
inline double shannon_entropy(std::span<const double> p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) {
            h -= v * std::log(v);
        }
    }
    return std::max(h, 0.0);
}

struct ReliabilityDescriptor {
    std::size_t predicted_index = 0;
    double r_token = 0.0;
    double r_verbal = 0.0;
    double r_cons = 0.0;
    double margin = 0.0;
    double entropy = 0.0;
    // [l(r_token), l(r_verbal), l(r_cons), margin, -entropy]
    std::array<double, kDescriptorDim> phi{};
};

inline std::array<double, kDescriptorDim> assemble_phi(double r_token, double r_verbal, double r_cons, double margin,
                                                       double entropy, double epsilon) {
    return {clipped_log_odds(r_token, epsilon), clipped_log_odds(r_verbal, epsilon),
            clipped_log_odds(r_cons, epsilon), margin, -entropy};
}

inline ReliabilityDescriptor build_descriptor(const ConfidenceRecord& rec, const FeatureHyperParams& hp) {
    if (rec.token_probs.size() != rec.k || rec.verbal.size() != rec.k || rec.k < 2) {
        throw InvalidRecordError(rec.id, "record channels are not populated for k=" + std::to_string(rec.k));
    }
    ReliabilityDescriptor d;
    d.predicted_index = predicted_option(rec.token_probs, rec.id);
    const std::size_t top = d.predicted_index;
    d.r_token = rec.token_probs[top];
    d.r_verbal = rec.verbal[top];
    d.r_cons = consistency(rec.token_probs[top], rec.verbal[top], hp.gamma, hp.tau);
    d.margin = top2_margin(rec.token_probs);
    d.entropy = shannon_entropy(rec.token_probs);
    d.phi = assemble_phi(d.r_token, d.r_verbal, d.r_cons, d.margin, d.entropy, hp.epsilon);
    return d;
}

inline std::vector<double> select_features(const ReliabilityDescriptor& d, FeatureSet set) {
    if (set == FeatureSet::token_only) {
        return {d.phi[0]};
    }
    return {d.phi.begin(), d.phi.end()};
}

// ---------------------------------------------------------------------------
// Standardizer

inline constexpr double kMinFeatureStd = 1e-8;

struct Standardizer {
    std::vector<double> mu;
    std::vector<double> sigma;
    std::vector<bool> dropped;

    std::size_t dim() const { return mu.size(); }

    // (phi_j - mu_j) / sigma_j with sigma_j > 0.
    std::vector<double> apply(std::span<const double> phi) const {
        if (phi.size() != mu.size()) {
            throw UsageError("standardizer dimension mismatch: expected " + std::to_string(mu.size()) + ", got " +
                             std::to_string(phi.size()));
        }
        std::vector<double> out(phi.size());
        for (std::size_t j = 0; j < phi.size(); ++j) {
            out[j] = (phi[j] - mu[j]) / sigma[j];
        }
        return out;
    }
};

// Population mean and standard deviation per column; columns with std below
// 1e-8 are marked dropped and pass through unchanged (mu 0, sigma 1).
inline Standardizer fit_standardizer(std::span<const std::vector<double>> rows) {
    if (rows.size() < 2) {
        throw FitError("standardizer needs at least 2 calibration rows, got " + std::to_string(rows.size()));
    }
    const std::size_t d = rows.front().size();
    Standardizer s;
    s.mu.assign(d, 0.0);
    s.sigma.assign(d, 1.0);
    s.dropped.assign(d, false);
    const double n = static_cast<double>(rows.size());
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (const auto& r : rows) {
            if (r.size() != d) {
                throw FitError("ragged feature rows");
            }
            mean += r[j];
        }
        mean /= n;
        double var = 0.0;
        for (const auto& r : rows) {
            var += (r[j] - mean) * (r[j] - mean);
        }
        const double sd = std::sqrt(var / n);
        if (!std::isfinite(mean) || !std::isfinite(sd)) {
            throw FitError("non-finite feature statistics in column " + std::to_string(j));
        }
        if (sd < kMinFeatureStd) {
            s.dropped[j] = true;
        } else {
            s.mu[j] = mean;
            s.sigma[j] = sd;
        }
    }
    return s;
}

} // namespace dualconf
