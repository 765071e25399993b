#pragma once

// Coordinatewise-monotone logistic fusion head.
//
//   q = sigmoid(b + sum_j softplus(w_raw_j) * phi_j)
//
// Effective weights are strictly positive, so raising any feature never
// lowers q. Fitting minimizes mean binary NLL with full-batch Adam and keeps
// the parameters with the best validation NLL.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dualconf/error.hpp"
#include "dualconf/numeric.hpp"

namespace dualconf {

struct FusionParameters {
    double bias = 0.0;
    std::vector<double> w_raw;

    static FusionParameters zeros(std::size_t dim) { return {0.0, std::vector<double>(dim, 0.0)}; }

    std::vector<double> effective_weights() const {
        std::vector<double> w(w_raw.size());
        std::transform(w_raw.begin(), w_raw.end(), w.begin(), softplus);
        return w;
    }

    friend bool operator==(const FusionParameters&, const FusionParameters&) = default;
};

struct FitConfig {
    double learning_rate = 0.05;
    std::size_t max_iters = 2000;
    double weight_decay = 1e-4;
    std::size_t patience = 50;
    // When false the validation rows are ignored and the final iterate is returned.
    bool early_stopping = true;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(learning_rate > 0.0)) {
            throw ConfigError("learning_rate must be positive");
        }
        if (max_iters < 1) {
            throw ConfigError("max_iters must be at least 1");
        }
        if (patience < 1) {
            throw ConfigError("patience must be at least 1");
        }
        if (!(weight_decay >= 0.0)) {
            throw ConfigError("weight_decay must be non-negative");
        }
    }
};

inline double head_logit(std::span<const double> phi, const FusionParameters& params) {
    if (phi.size() != params.w_raw.size()) {
        throw UsageError("head_logit: feature dimension " + std::to_string(phi.size()) + " != weight dimension " +
                         std::to_string(params.w_raw.size()));
    }
    // Bias added last: a change of bias then moves every logit by the same
    // rounded amount, which keeps the ordering of logits intact.
    double z = 0.0;
    for (std::size_t j = 0; j < phi.size(); ++j) {
        z += softplus(params.w_raw[j]) * phi[j];
    }
    return z + params.bias;
}

inline double predict_prob(std::span<const double> phi, const FusionParameters& params) {
    return sigmoid(head_logit(phi, params));
}

inline constexpr double kProbClip = 1e-12;

struct LossAndGradient {
    // nll + (weight_decay / 2) * |w_raw|^2; the gradient below is of this objective.
    double objective = 0.0;
    double nll = 0.0;
    double grad_bias = 0.0;
    std::vector<double> grad_w_raw;
};

inline double mean_nll(std::span<const std::vector<double>> rows, std::span<const int> labels,
                       const FusionParameters& params) {
    if (rows.empty() || rows.size() != labels.size()) {
        throw FitError("NLL needs a nonempty feature matrix with one label per row");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double q = std::clamp(predict_prob(rows[i], params), kProbClip, 1.0 - kProbClip);
        total -= labels[i] != 0 ? std::log(q) : std::log1p(-q);
    }
    return total / static_cast<double>(rows.size());
}

inline LossAndGradient nll_and_gradient(const FusionParameters& params, std::span<const std::vector<double>> rows,
                                        std::span<const int> labels, double weight_decay = 0.0) {
    if (rows.empty() || rows.size() != labels.size()) {
        throw FitError("NLL needs a nonempty feature matrix with one label per row");
    }
    const std::size_t d = params.w_raw.size();
    const auto w = params.effective_weights();
    LossAndGradient out;
    out.grad_w_raw.assign(d, 0.0);
    std::vector<double> feature_grad(d, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& phi = rows[i];
        if (phi.size() != d) {
            throw FitError("feature row " + std::to_string(i) + " has dimension " + std::to_string(phi.size()));
        }
        double z = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            z += w[j] * phi[j];
        }
        const double q = sigmoid(z + params.bias);
        const double qc = std::clamp(q, kProbClip, 1.0 - kProbClip);
        const bool y = labels[i] != 0;
        total -= y ? std::log(qc) : std::log1p(-qc);
        const double residual = q - (y ? 1.0 : 0.0);
        out.grad_bias += residual;
        for (std::size_t j = 0; j < d; ++j) {
            feature_grad[j] += residual * phi[j];
        }
    }
    const double n = static_cast<double>(rows.size());
    out.nll = total / n;
    out.grad_bias /= n;
    double penalty = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        // d softplus(x)/dx = sigmoid(x)
        out.grad_w_raw[j] = feature_grad[j] / n * sigmoid(params.w_raw[j]) + weight_decay * params.w_raw[j];
        penalty += params.w_raw[j] * params.w_raw[j];
    }
    out.objective = out.nll + 0.5 * weight_decay * penalty;
    return out;
}

struct HeadFit {
    FusionParameters params;
    std::size_t iterations = 0;
    std::size_t best_iteration = 0;
    // Validation NLL at the returned parameters, or the calibration objective
    // when no validation rows were given.
    double best_nll = 0.0;
};

namespace detail {

// Rows in a canonical order so the fit does not depend on input order.
inline std::vector<std::size_t> canonical_order(std::span<const std::vector<double>> rows, std::span<const int> labels) {
    std::vector<std::size_t> idx(rows.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (rows[a] != rows[b]) {
            return rows[a] < rows[b];
        }
        return labels[a] < labels[b];
    });
    return idx;
}

struct OrderedData {
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
};

inline OrderedData reorder(std::span<const std::vector<double>> rows, std::span<const int> labels) {
    OrderedData out;
    for (std::size_t i : canonical_order(rows, labels)) {
        out.rows.push_back(rows[i]);
        out.labels.push_back(labels[i]);
    }
    return out;
}

} // namespace detail

// Full-batch Adam from b = 0, w_raw = 0. With validation rows, stops after
// `patience` iterations without validation-NLL improvement and returns the
// best parameters seen; without them runs max_iters on the calibration loss.
inline HeadFit fit_head(std::span<const std::vector<double>> cal_rows, std::span<const int> cal_labels,
                        std::span<const std::vector<double>> val_rows, std::span<const int> val_labels,
                        const FitConfig& cfg) {
    cfg.validate();
    if (cal_rows.empty()) {
        throw FitError("calibration split is empty");
    }
    if (cal_rows.size() != cal_labels.size() || val_rows.size() != val_labels.size()) {
        throw FitError("feature/label count mismatch");
    }
    const auto cal = detail::reorder(cal_rows, cal_labels);
    const auto val = detail::reorder(val_rows, val_labels);
    const bool early_stop = cfg.early_stopping && !val.rows.empty();
    const std::size_t d = cal.rows.front().size();

    FusionParameters params = FusionParameters::zeros(d);
    std::vector<double> m(d + 1, 0.0);
    std::vector<double> v(d + 1, 0.0);
    double beta1_t = 1.0;
    double beta2_t = 1.0;

    HeadFit best;
    best.params = params;
    best.best_nll = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;

    auto check_finite = [](double x, std::size_t iter) {
        if (!std::isfinite(x)) {
            throw ConvergenceError("non-finite loss at iteration " + std::to_string(iter));
        }
    };

    std::size_t iter = 0;
    for (; iter < cfg.max_iters; ++iter) {
        const auto lg = nll_and_gradient(params, cal.rows, cal.labels, cfg.weight_decay);
        check_finite(lg.objective, iter);
        const double monitored = early_stop ? mean_nll(val.rows, val.labels, params) : lg.objective;
        check_finite(monitored, iter);
        if (monitored < best.best_nll) {
            best.best_nll = monitored;
            best.params = params;
            best.best_iteration = iter;
            since_best = 0;
        } else if (early_stop && ++since_best >= cfg.patience) {
            break;
        }

        beta1_t *= cfg.beta1;
        beta2_t *= cfg.beta2;
        for (std::size_t j = 0; j <= d; ++j) {
            const double g = j == 0 ? lg.grad_bias : lg.grad_w_raw[j - 1];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            const double m_hat = m[j] / (1.0 - beta1_t);
            const double v_hat = v[j] / (1.0 - beta2_t);
            const double step = cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
            if (j == 0) {
                params.bias -= step;
            } else {
                params.w_raw[j - 1] -= step;
            }
        }
    }
    if (iter == cfg.max_iters) {
        const double monitored = early_stop ? mean_nll(val.rows, val.labels, params)
                                            : nll_and_gradient(params, cal.rows, cal.labels, cfg.weight_decay).objective;
        check_finite(monitored, iter);
        if (monitored < best.best_nll) {
            best.best_nll = monitored;
            best.params = params;
            best.best_iteration = iter;
        }
    }
    best.iterations = iter;
    return best;
}

} // namespace dualconf
