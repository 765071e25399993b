#pragma once

// Synthetic dual-channel records with controlled miscalibration.
//
// Each record draws a latent logit a ~ N(difficulty_mean, difficulty_sd) and a
// correctness probability pi = 1/k + (1 - 1/k) * sigmoid(a), so the top-1
// probability of a k-way simplex can represent it exactly. A channel with
// shift s, scale c and noise e reports 1/k + (1 - 1/k) * sigmoid(c * (a + e * N(0,1)) + s);
// with s = 0, c = 1, e = 0 the channel is calibrated by construction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualconf/error.hpp"
#include "dualconf/numeric.hpp"
#include "dualconf/records.hpp"

namespace dualconf {

struct ChannelDistortion {
    double shift = 0.0;
    double scale = 1.0;
    double noise = 0.0;
};

struct SyntheticConfig {
    std::size_t n = 1000;
    std::size_t k = 4;
    double difficulty_mean = 0.5;
    double difficulty_sd = 1.5;
    ChannelDistortion token;
    ChannelDistortion verbal;
    // Fraction of records whose verbal response contains no usable numbers.
    double verbal_missing_rate = 0.0;
    std::uint64_t seed = 0;
    std::string id_prefix = "syn";

    void validate() const {
        if (n < 1) {
            throw ConfigError("synthetic n must be at least 1");
        }
        if (k < 2) {
            throw ConfigError("synthetic k must be at least 2");
        }
        if (!(difficulty_sd >= 0.0) || !std::isfinite(difficulty_mean)) {
            throw ConfigError("difficulty distribution needs a finite mean and non-negative sd");
        }
        for (const auto* ch : {&token, &verbal}) {
            if (!(ch->scale >= 0.0) || !(ch->noise >= 0.0) || !std::isfinite(ch->shift)) {
                throw ConfigError("channel scale and noise must be non-negative and shift finite");
            }
        }
        if (!(verbal_missing_rate >= 0.0 && verbal_missing_rate <= 1.0)) {
            throw ConfigError("verbal_missing_rate must lie in [0,1]");
        }
    }
};

inline constexpr const char* kMetaLatentProbability = "latent_p";

namespace detail {

inline double floor_mapped(double x, std::size_t k) {
    const double floor = 1.0 / static_cast<double>(k);
    return floor + (1.0 - floor) * sigmoid(x);
}

} // namespace detail

inline std::vector<ConfidenceRecord> generate_synthetic(const SyntheticConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    const std::size_t k = cfg.k;
    const std::size_t width = std::to_string(cfg.n - 1).size();

    std::vector<ConfidenceRecord> out;
    out.reserve(cfg.n);
    for (std::size_t i = 0; i < cfg.n; ++i) {
        const double latent = cfg.difficulty_mean + cfg.difficulty_sd * normal(rng);
        const double pi = detail::floor_mapped(latent, k);
        const bool correct = uniform(rng) < pi;
        const std::size_t gold = std::min(static_cast<std::size_t>(uniform(rng) * static_cast<double>(k)), k - 1);
        std::size_t predicted = gold;
        if (!correct) {
            const std::size_t offset = 1 + std::min(static_cast<std::size_t>(uniform(rng) * static_cast<double>(k - 1)),
                                                    k - 2);
            predicted = (gold + offset) % k;
        }

        // Token channel: top mass t on the predicted option, the rest spread with mild jitter.
        const double token_noise = normal(rng);
        // Capped below 1 so every option keeps a finite log-probability.
        const double t = std::min(
            detail::floor_mapped(cfg.token.scale * (latent + cfg.token.noise * token_noise) + cfg.token.shift, k),
            1.0 - 1e-12);
        std::vector<double> weights(k - 1);
        double weight_sum = 0.0;
        for (double& w : weights) {
            w = 0.5 + uniform(rng);
            weight_sum += w;
        }
        std::vector<double> probs(k, 0.0);
        probs[predicted] = t;
        bool jitter_ok = true;
        for (std::size_t j = 0, w = 0; j < k; ++j) {
            if (j == predicted) {
                continue;
            }
            probs[j] = (1.0 - t) * weights[w++] / weight_sum;
            jitter_ok = jitter_ok && probs[j] < t;
        }
        if (!jitter_ok) {
            for (std::size_t j = 0; j < k; ++j) {
                if (j != predicted) {
                    probs[j] = (1.0 - t) / static_cast<double>(k - 1);
                }
            }
        }
        const double logprob_offset = 3.0 * uniform(rng);
        std::vector<double> logprobs(k);
        for (std::size_t j = 0; j < k; ++j) {
            logprobs[j] = std::log(probs[j]) - logprob_offset;
        }

        // Verbal channel: integer percentages, not normalized.
        const double verbal_noise = normal(rng);
        const double v =
            detail::floor_mapped(cfg.verbal.scale * (latent + cfg.verbal.noise * verbal_noise) + cfg.verbal.shift, k);
        const bool missing = uniform(rng) < cfg.verbal_missing_rate;
        nlohmann::ordered_json response = nlohmann::ordered_json::object();
        const long top_percent = std::lround(100.0 * v);
        for (std::size_t j = 0; j < k; ++j) {
            const double share = uniform(rng);
            long percent = top_percent;
            if (j != predicted) {
                percent = std::lround(static_cast<double>(100 - top_percent) * share);
            }
            response[std::to_string(j + 1)] = percent;
        }
        std::string text = missing ? std::string("I cannot determine my confidence for this question.")
                                   : std::to_string(predicted + 1) + "\n" + response.dump();

        RecordInput in;
        in.id = cfg.id_prefix + "-" + std::string(width - std::to_string(i).size(), '0') + std::to_string(i);
        in.k = k;
        in.option_logprobs = std::move(logprobs);
        in.verbal_raw = std::move(text);
        in.gold_index = gold;
        in.meta = {{"dataset", "synthetic"}, {"model", "synthetic"}, {kMetaLatentProbability, format_double(pi)}};
        out.push_back(build_record(std::move(in)));
    }
    return out;
}

} // namespace dualconf
