#pragma once

// Order-preserving mean alignment: a single bias shift delta chosen so the
// mean predicted probability matches a target accuracy.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include "dualconf/error.hpp"
#include "dualconf/fusion.hpp"
#include "dualconf/numeric.hpp"

namespace dualconf {

struct AlignmentConfig {
    double bracket = 20.0;
    double tolerance = 1e-8;
    double epsilon = 1e-6;
    std::size_t max_iters = 200;
    std::size_t max_bracket_doublings = 4;

    void validate() const {
        if (!(bracket > 0.0)) {
            throw ConfigError("bracket M must be positive");
        }
        if (!(tolerance > 0.0)) {
            throw ConfigError("tolerance eta must be positive");
        }
        if (!(epsilon > 0.0 && epsilon < 0.5)) {
            throw ConfigError("alignment epsilon must lie in (0, 0.5)");
        }
    }
};

// g(delta) = mean_i sigmoid(logit_i + delta); continuous and strictly increasing.
inline double mean_predicted(double delta, std::span<const double> logits) {
    if (logits.empty()) {
        throw UsageError("mean_predicted: empty logit set");
    }
    double total = 0.0;
    for (double z : logits) {
        total += sigmoid(z + delta);
    }
    return total / static_cast<double>(logits.size());
}

struct AlignmentResult {
    double delta = 0.0;
    double residual = 0.0;
    double target = 0.0;
    bool target_clipped = false;
    double bracket = 0.0;
    std::size_t iterations = 0;
};

inline std::size_t bisection_iteration_bound(double bracket, double tolerance) {
    return static_cast<std::size_t>(std::ceil(std::log2(2.0 * bracket / tolerance)));
}

inline AlignmentResult solve_delta(std::span<const double> logits, double target_acc, const AlignmentConfig& cfg = {}) {
    cfg.validate();
    if (logits.empty()) {
        throw UsageError("solve_delta: empty logit set");
    }
    for (double z : logits) {
        if (!std::isfinite(z)) {
            throw UsageError("solve_delta: non-finite logit");
        }
    }
    if (!std::isfinite(target_acc)) {
        throw UsageError("solve_delta: non-finite target");
    }
    AlignmentResult out;
    out.target = std::clamp(target_acc, cfg.epsilon, 1.0 - cfg.epsilon);
    out.target_clipped = out.target != target_acc;
    const double t = out.target;

    double half_width = cfg.bracket;
    double lo = -half_width;
    double hi = half_width;
    for (std::size_t doublings = 0;; ++doublings) {
        lo = -half_width;
        hi = half_width;
        if (mean_predicted(lo, logits) <= t && t <= mean_predicted(hi, logits)) {
            break;
        }
        if (doublings == cfg.max_bracket_doublings) {
            throw ConvergenceError("mean alignment: target " + format_double(t) + " not bracketed by [-" +
                                   format_double(half_width) + ", " + format_double(half_width) + "]");
        }
        half_width *= 2.0;
    }
    out.bracket = half_width;

    // Stop once the residual is within eta and the midpoint is also within eta
    // of the root in delta-space (half the current bracket width). Both hold
    // by iteration ceil(log2(2M / eta)) since g has slope at most 1/4.
    double mid = 0.0;
    double g = 0.0;
    for (std::size_t iter = 1; iter <= cfg.max_iters; ++iter) {
        mid = 0.5 * (lo + hi);
        g = mean_predicted(mid, logits);
        out.iterations = iter;
        if (std::abs(g - t) <= cfg.tolerance && 0.5 * (hi - lo) <= cfg.tolerance) {
            out.delta = mid;
            out.residual = std::abs(g - t);
            return out;
        }
        if (g < t) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    throw ConvergenceError("mean alignment did not converge: residual " + format_double(std::abs(g - t)) + " after " +
                           std::to_string(cfg.max_iters) + " iterations");
}

inline FusionParameters apply_shift(FusionParameters params, double delta) {
    if (!std::isfinite(delta)) {
        throw UsageError("apply_shift: non-finite delta");
    }
    params.bias += delta;
    return params;
}

} // namespace dualconf
