#pragma once

// End-to-end calibrator fitting, the serialized artifact, and evaluation.
//
// Fitting order: descriptors -> standardizer on the calibration split ->
// monotone head with validation early stopping -> mean-alignment shift on the
// validation split (or on pooled out-of-fold logits in cross-fit mode), with
// the consistency bandwidth tau chosen by post-alignment validation NLL.
// Test-split records never reach any fitting stage.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "dualconf/alignment.hpp"
#include "dualconf/error.hpp"
#include "dualconf/features.hpp"
#include "dualconf/fusion.hpp"
#include "dualconf/metrics.hpp"
#include "dualconf/records.hpp"
#include "dualconf/report.hpp"

namespace dualconf {

inline constexpr int kArtifactVersion = 1;
inline constexpr const char* kArtifactFormat = "dualconf-calibrator";

enum class AlignmentMode { validation, cross_fit };

inline const char* to_string(AlignmentMode m) { return m == AlignmentMode::validation ? "validation" : "cross_fit"; }

inline AlignmentMode alignment_mode_from_string(const std::string& s) {
    if (s == "validation") {
        return AlignmentMode::validation;
    }
    if (s == "cross_fit") {
        return AlignmentMode::cross_fit;
    }
    throw ConfigError("unknown alignment mode '" + s + "' (expected validation or cross_fit)");
}

struct PipelineConfig {
    SplitConfig split;
    // tau here is ignored; the bandwidth comes from tau_grid.
    FeatureHyperParams features;
    std::vector<double> tau_grid = {0.05, 0.1, 0.2, 0.5, 1.0};
    FeatureSet feature_set = FeatureSet::full;
    FitConfig fit;
    AlignmentConfig alignment;
    AlignmentMode alignment_mode = AlignmentMode::validation;
    std::optional<std::string> timestamp;
};

struct TauCandidate {
    double tau = 0.0;
    double validation_nll = 0.0;
};

struct Provenance {
    std::uint64_t seed = 0;
    double calibration_fraction = 0.0;
    double validation_fraction = 0.0;
    std::optional<std::size_t> folds;
    std::size_t n_calibration = 0;
    std::size_t n_validation = 0;
    std::size_t n_test = 0;
    std::string alignment_split;
    double alignment_accuracy = 0.0;
    double alignment_target = 0.0;
    bool alignment_target_clipped = false;
    double alignment_residual = 0.0;
    std::size_t alignment_iterations = 0;
    std::vector<TauCandidate> tau_search;
    std::size_t head_iterations = 0;
    std::size_t head_best_iteration = 0;
    std::optional<std::string> timestamp;
    // Calibrated probabilities on the validation split at save time.
    std::vector<std::pair<std::string, double>> validation_predictions;
};

struct CalibratorArtifact {
    int version = kArtifactVersion;
    FeatureHyperParams features;
    FeatureSet feature_set = FeatureSet::full;
    Standardizer standardizer;
    FusionParameters head;
    double delta = 0.0;
    Provenance provenance;

    FusionParameters shifted_head() const { return apply_shift(head, delta); }
};

inline double calibrated_logit(const ConfidenceRecord& r, const CalibratorArtifact& a, bool shifted = true) {
    const auto phi = select_features(build_descriptor(r, a.features), a.feature_set);
    const double z = head_logit(a.standardizer.apply(phi), a.head);
    return shifted ? z + a.delta : z;
}

// sigmoid(z + delta) with z the unshifted head logit, the same arithmetic the
// alignment solve uses.
inline double calibrated_confidence(const ConfidenceRecord& r, const CalibratorArtifact& a) {
    return sigmoid(calibrated_logit(r, a, true));
}

// Called with each fitting stage name and the record ids it consumes.
using FitObserver = std::function<void(std::string_view stage, std::span<const std::string> ids)>;

class LeakageGuard {
public:
    explicit LeakageGuard(std::set<std::string> forbidden) : forbidden_(std::move(forbidden)) {}

    void check(std::string_view stage, std::span<const std::string> ids) const {
        for (const auto& id : ids) {
            if (forbidden_.count(id) != 0) {
                throw LeakageError("test record '" + id + "' reached stage " + std::string(stage));
            }
        }
    }

private:
    std::set<std::string> forbidden_;
};

struct LabeledRows {
    std::vector<std::string> ids;
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
};

inline LabeledRows build_rows(std::span<const ConfidenceRecord* const> records, const FeatureHyperParams& hp,
                              FeatureSet set) {
    LabeledRows out;
    for (const auto* r : records) {
        out.ids.push_back(r->id);
        out.rows.push_back(select_features(build_descriptor(*r, hp), set));
        out.labels.push_back(r->correct ? 1 : 0);
    }
    return out;
}

inline std::vector<std::vector<double>> standardize_rows(const Standardizer& s,
                                                         std::span<const std::vector<double>> rows) {
    std::vector<std::vector<double>> out;
    out.reserve(rows.size());
    for (const auto& r : rows) {
        out.push_back(s.apply(r));
    }
    return out;
}

inline std::vector<double> head_logits(const FusionParameters& p, std::span<const std::vector<double>> rows) {
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) {
        out.push_back(head_logit(r, p));
    }
    return out;
}

inline double shifted_nll(std::span<const double> logits, std::span<const int> labels, double delta) {
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double q = std::clamp(sigmoid(logits[i] + delta), kProbClip, 1.0 - kProbClip);
        total -= labels[i] != 0 ? std::log(q) : std::log1p(-q);
    }
    return total / static_cast<double>(logits.size());
}

namespace detail {

// Runs one fitting stage; errors are re-thrown with the stage name prepended
// and their exit code kept.
template <class F>
auto run_stage(std::string_view stage, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ConvergenceError& e) {
        throw ConvergenceError("stage " + std::string(stage) + ": " + e.what());
    } catch (const Error& e) {
        throw Error(e.code(), "stage " + std::string(stage) + ": " + e.what());
    }
}

struct CandidateFit {
    double tau = 0.0;
    Standardizer standardizer;
    HeadFit head;
    AlignmentResult alignment;
    double alignment_accuracy = 0.0;
    double score = 0.0;
};

inline std::vector<const ConfidenceRecord*> pick(std::span<const ConfidenceRecord> records,
                                                 const std::function<bool(const ConfidenceRecord&)>& keep) {
    std::vector<const ConfidenceRecord*> out;
    for (const auto& r : records) {
        if (keep(r)) {
            out.push_back(&r);
        }
    }
    // Id order makes every fitted quantity independent of input order.
    std::sort(out.begin(), out.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
    return out;
}

} // namespace detail

struct PipelineResult {
    CalibratorArtifact artifact;
    SplitAssignment splits;
};

inline PipelineResult fit_pipeline_with_split(std::span<const ConfidenceRecord> records, const SplitAssignment& splits,
                                              const PipelineConfig& cfg, const FitObserver& observer = {}) {
    cfg.fit.validate();
    cfg.alignment.validate();
    if (cfg.tau_grid.empty()) {
        throw ConfigError("tau grid is empty");
    }

    std::set<std::string> test_ids;
    for (const auto& id : splits.ids(Split::test)) {
        test_ids.insert(id);
    }
    const LeakageGuard guard(test_ids);
    auto enter = [&](std::string_view stage, std::span<const std::string> ids) {
        guard.check(stage, ids);
        if (observer) {
            observer(stage, ids);
        }
    };

    auto in_split = [&](Split s) {
        return detail::pick(records, [&](const ConfidenceRecord& r) { return splits.at(r.id).split == s; });
    };
    const auto cal_records = in_split(Split::calibration);
    const auto val_records = in_split(Split::validation);
    if (cal_records.size() < 2) {
        throw FitError("calibration split has " + std::to_string(cal_records.size()) + " records; need at least 2");
    }
    if (val_records.empty()) {
        throw FitError("validation split is empty");
    }

    const bool uses_tau = cfg.feature_set == FeatureSet::full;
    const std::vector<double> grid = uses_tau ? cfg.tau_grid : std::vector<double>{cfg.tau_grid.front()};

    std::optional<detail::CandidateFit> best;
    std::vector<TauCandidate> search;
    std::optional<std::size_t> folds;

    if (cfg.alignment_mode == AlignmentMode::validation) {
        for (double tau : grid) {
            FeatureHyperParams hp = cfg.features;
            hp.tau = tau;
            hp.validate();
            const auto cal = build_rows(cal_records, hp, cfg.feature_set);
            const auto val = build_rows(val_records, hp, cfg.feature_set);

            enter("fit_standardizer", cal.ids);
            detail::CandidateFit c;
            c.tau = tau;
            c.standardizer = detail::run_stage("fit_standardizer", [&] { return fit_standardizer(cal.rows); });
            const auto cal_std = standardize_rows(c.standardizer, cal.rows);
            const auto val_std = standardize_rows(c.standardizer, val.rows);

            enter("fit_head", cal.ids);
            enter("fit_head", val.ids);
            c.head = detail::run_stage("fit_head", [&] { return fit_head(cal_std, cal.labels, val_std, val.labels, cfg.fit); });

            enter("solve_delta", val.ids);
            const auto logits = head_logits(c.head.params, val_std);
            c.alignment_accuracy = accuracy(val.labels);
            c.alignment = detail::run_stage(
                "solve_delta", [&] { return solve_delta(logits, c.alignment_accuracy, cfg.alignment); });

            enter("tau_selection", val.ids);
            c.score = shifted_nll(logits, val.labels, c.alignment.delta);
            search.push_back({tau, c.score});
            if (!best || c.score < best->score) {
                best = std::move(c);
            }
        }
    } else {
        folds = cfg.split.folds;
        if (!folds) {
            throw ConfigError("cross_fit alignment requires folds");
        }
        std::vector<const ConfidenceRecord*> pool(cal_records);
        pool.insert(pool.end(), val_records.begin(), val_records.end());
        std::sort(pool.begin(), pool.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
        for (double tau : grid) {
            FeatureHyperParams hp = cfg.features;
            hp.tau = tau;
            hp.validate();
            const auto all = build_rows(pool, hp, cfg.feature_set);
            std::vector<double> oof_logits(pool.size());
            for (std::size_t f = 0; f < *folds; ++f) {
                LabeledRows train;
                std::vector<std::size_t> held;
                for (std::size_t i = 0; i < pool.size(); ++i) {
                    if (splits.at(pool[i]->id).fold == f) {
                        held.push_back(i);
                    } else {
                        train.ids.push_back(all.ids[i]);
                        train.rows.push_back(all.rows[i]);
                        train.labels.push_back(all.labels[i]);
                    }
                }
                enter("fit_standardizer", train.ids);
                const auto s = detail::run_stage("fit_standardizer", [&] { return fit_standardizer(train.rows); });
                enter("fit_head", train.ids);
                const auto h = detail::run_stage(
                    "fit_head", [&] { return fit_head(standardize_rows(s, train.rows), train.labels, {}, {}, cfg.fit); });
                for (std::size_t i : held) {
                    oof_logits[i] = head_logit(s.apply(all.rows[i]), h.params);
                }
            }
            detail::CandidateFit c;
            c.tau = tau;
            enter("solve_delta", all.ids);
            c.alignment_accuracy = accuracy(all.labels);
            c.alignment = detail::run_stage(
                "solve_delta", [&] { return solve_delta(oof_logits, c.alignment_accuracy, cfg.alignment); });
            enter("tau_selection", all.ids);
            c.score = shifted_nll(oof_logits, all.labels, c.alignment.delta);
            search.push_back({tau, c.score});
            if (!best || c.score < best->score) {
                enter("fit_standardizer", all.ids);
                c.standardizer = detail::run_stage("fit_standardizer", [&] { return fit_standardizer(all.rows); });
                enter("fit_head", all.ids);
                c.head = detail::run_stage(
                    "fit_head", [&] { return fit_head(standardize_rows(c.standardizer, all.rows), all.labels, {}, {}, cfg.fit); });
                best = std::move(c);
            }
        }
    }

    CalibratorArtifact a;
    a.features = cfg.features;
    a.features.tau = best->tau;
    a.feature_set = cfg.feature_set;
    a.standardizer = best->standardizer;
    a.head = best->head.params;
    a.delta = best->alignment.delta;

    auto& p = a.provenance;
    p.seed = cfg.split.seed;
    p.calibration_fraction = cfg.split.calibration_fraction;
    p.validation_fraction = cfg.split.validation_fraction;
    p.folds = folds;
    p.n_calibration = splits.count(Split::calibration);
    p.n_validation = splits.count(Split::validation);
    p.n_test = splits.count(Split::test);
    p.alignment_split = to_string(cfg.alignment_mode);
    p.alignment_accuracy = best->alignment_accuracy;
    p.alignment_target = best->alignment.target;
    p.alignment_target_clipped = best->alignment.target_clipped;
    p.alignment_residual = best->alignment.residual;
    p.alignment_iterations = best->alignment.iterations;
    p.tau_search = std::move(search);
    p.head_iterations = best->head.iterations;
    p.head_best_iteration = best->head.best_iteration;
    p.timestamp = cfg.timestamp;

    for (const auto* r : val_records) {
        p.validation_predictions.emplace_back(r->id, calibrated_confidence(*r, a));
    }
    std::sort(p.validation_predictions.begin(), p.validation_predictions.end());
    return {std::move(a), splits};
}

inline PipelineResult fit_pipeline(std::span<const ConfidenceRecord> records, const PipelineConfig& cfg,
                                   const FitObserver& observer = {}) {
    const auto ids = record_ids(records);
    return fit_pipeline_with_split(records, split_dataset(ids, cfg.split), cfg, observer);
}

// ---------------------------------------------------------------------------
// Evaluation

enum class Channel { token, verbal, calibrated };

inline const char* to_string(Channel c) {
    switch (c) {
    case Channel::token:
        return "token";
    case Channel::verbal:
        return "verbal";
    case Channel::calibrated:
        return "calibrated";
    }
    return "unknown";
}

inline Channel channel_from_string(const std::string& s) {
    if (s == "token") {
        return Channel::token;
    }
    if (s == "verbal") {
        return Channel::verbal;
    }
    if (s == "calibrated") {
        return Channel::calibrated;
    }
    throw UsageError("unknown channel selector '" + s + "' (expected token, verbal or calibrated)");
}

inline std::vector<double> channel_confidences(std::span<const ConfidenceRecord> records, Channel channel,
                                               const CalibratorArtifact* artifact) {
    if (channel == Channel::calibrated && artifact == nullptr) {
        throw UsageError("calibrated channel requires a calibrator artifact");
    }
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        const std::size_t top = predicted_option(r.token_probs, r.id);
        switch (channel) {
        case Channel::token:
            out.push_back(r.token_probs[top]);
            break;
        case Channel::verbal:
            out.push_back(r.verbal[top]);
            break;
        case Channel::calibrated:
            out.push_back(calibrated_confidence(r, *artifact));
            break;
        }
    }
    return out;
}

inline std::vector<int> correctness(std::span<const ConfidenceRecord> records) {
    std::vector<int> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        out.push_back(r.correct ? 1 : 0);
    }
    return out;
}

inline void check_artifact_version(const CalibratorArtifact& a) {
    if (a.version != kArtifactVersion) {
        throw ParseError(0, "version",
                         "unsupported artifact version " + std::to_string(a.version) + " (expected " +
                             std::to_string(kArtifactVersion) + ")");
    }
}

// Metrics over all records, plus one sub-report per distinct value of meta[group_by].
inline MetricReport evaluate(std::span<const ConfidenceRecord> records, const CalibratorArtifact* artifact,
                             Channel channel, std::size_t n_bins = 10,
                             const std::optional<std::string>& group_by = std::nullopt) {
    if (records.empty()) {
        throw UsageError("evaluate: no records");
    }
    if (artifact != nullptr) {
        check_artifact_version(*artifact);
    }
    const auto conf = channel_confidences(records, channel, artifact);
    const auto labels = correctness(records);
    auto report = compute_report(conf, labels, n_bins, to_string(channel));
    if (group_by) {
        std::map<std::string, std::pair<std::vector<double>, std::vector<int>>> groups;
        for (std::size_t i = 0; i < records.size(); ++i) {
            auto it = records[i].meta.find(*group_by);
            auto& g = groups[it == records[i].meta.end() ? std::string("(none)") : it->second];
            g.first.push_back(conf[i]);
            g.second.push_back(labels[i]);
        }
        for (const auto& [key, g] : groups) {
            report.groups.emplace(key, compute_report(g.first, g.second, n_bins, to_string(channel)));
        }
    }
    return report;
}

// Records restricted to one split, in input order.
inline std::vector<ConfidenceRecord> select_split(std::span<const ConfidenceRecord> records,
                                                  const SplitAssignment& splits, Split which) {
    std::vector<ConfidenceRecord> out;
    for (const auto& r : records) {
        if (splits.at(r.id).split == which) {
            out.push_back(r);
        }
    }
    return out;
}

// Number of saved validation predictions that the artifact does not reproduce bit-identically.
inline std::size_t verify_validation_predictions(std::span<const ConfidenceRecord> records,
                                                 const CalibratorArtifact& a) {
    std::unordered_map<std::string, const ConfidenceRecord*> by_id;
    for (const auto& r : records) {
        by_id.emplace(r.id, &r);
    }
    std::size_t mismatches = 0;
    for (const auto& [id, q] : a.provenance.validation_predictions) {
        auto it = by_id.find(id);
        if (it == by_id.end() || calibrated_confidence(*it->second, a) != q) {
            ++mismatches;
        }
    }
    return mismatches;
}

// ---------------------------------------------------------------------------
// Artifact JSON

inline nlohmann::ordered_json to_json(const CalibratorArtifact& a) {
    nlohmann::ordered_json j;
    j["format"] = kArtifactFormat;
    j["version"] = a.version;
    j["features"] = {{"epsilon", a.features.epsilon},
                     {"gamma", a.features.gamma},
                     {"tau", a.features.tau},
                     {"feature_set", to_string(a.feature_set)}};
    j["standardizer"] = {{"mu", a.standardizer.mu},
                         {"sigma", a.standardizer.sigma},
                         {"dropped", a.standardizer.dropped}};
    j["head"] = {{"b", a.head.bias}, {"w_raw", a.head.w_raw}};
    j["delta"] = a.delta;

    const auto& p = a.provenance;
    nlohmann::ordered_json prov;
    prov["seed"] = p.seed;
    prov["calibration_fraction"] = p.calibration_fraction;
    prov["validation_fraction"] = p.validation_fraction;
    prov["folds"] = p.folds ? nlohmann::ordered_json(*p.folds) : nlohmann::ordered_json(nullptr);
    prov["n_calibration"] = p.n_calibration;
    prov["n_validation"] = p.n_validation;
    prov["n_test"] = p.n_test;
    prov["alignment_split"] = p.alignment_split;
    prov["alignment_accuracy"] = p.alignment_accuracy;
    prov["alignment_target"] = p.alignment_target;
    prov["alignment_target_clipped"] = p.alignment_target_clipped;
    prov["alignment_residual"] = p.alignment_residual;
    prov["alignment_iterations"] = p.alignment_iterations;
    auto& search = prov["tau_search"] = nlohmann::ordered_json::array();
    for (const auto& t : p.tau_search) {
        search.push_back({{"tau", t.tau}, {"validation_nll", t.validation_nll}});
    }
    prov["head_iterations"] = p.head_iterations;
    prov["head_best_iteration"] = p.head_best_iteration;
    prov["timestamp"] = p.timestamp ? nlohmann::ordered_json(*p.timestamp) : nlohmann::ordered_json(nullptr);
    auto& preds = prov["validation_predictions"] = nlohmann::ordered_json::array();
    for (const auto& [id, q] : p.validation_predictions) {
        preds.push_back({id, q});
    }
    j["provenance"] = std::move(prov);
    return j;
}

inline CalibratorArtifact artifact_from_json(const nlohmann::json& j) {
    CalibratorArtifact a;
    try {
        if (j.value("format", std::string()) != kArtifactFormat) {
            throw ParseError(0, "format", "not a calibrator artifact");
        }
        a.version = j.at("version").get<int>();
        check_artifact_version(a);
        const auto& f = j.at("features");
        a.features.epsilon = f.at("epsilon").get<double>();
        a.features.gamma = f.at("gamma").get<double>();
        a.features.tau = f.at("tau").get<double>();
        a.features.validate();
        a.feature_set = feature_set_from_string(f.at("feature_set").get<std::string>());
        const auto& s = j.at("standardizer");
        a.standardizer.mu = s.at("mu").get<std::vector<double>>();
        a.standardizer.sigma = s.at("sigma").get<std::vector<double>>();
        a.standardizer.dropped = s.at("dropped").get<std::vector<bool>>();
        a.head.bias = j.at("head").at("b").get<double>();
        a.head.w_raw = j.at("head").at("w_raw").get<std::vector<double>>();
        a.delta = j.at("delta").get<double>();

        const std::size_t d = feature_dim(a.feature_set);
        if (a.standardizer.mu.size() != d || a.standardizer.sigma.size() != d || a.standardizer.dropped.size() != d ||
            a.head.w_raw.size() != d) {
            throw ParseError(0, "standardizer", "dimensions do not match feature set");
        }
        for (double sd : a.standardizer.sigma) {
            if (!(sd > 0.0)) {
                throw ParseError(0, "standardizer.sigma", "scales must be positive");
            }
        }

        const auto& pj = j.at("provenance");
        auto& p = a.provenance;
        p.seed = pj.at("seed").get<std::uint64_t>();
        p.calibration_fraction = pj.at("calibration_fraction").get<double>();
        p.validation_fraction = pj.at("validation_fraction").get<double>();
        if (!pj.at("folds").is_null()) {
            p.folds = pj.at("folds").get<std::size_t>();
        }
        p.n_calibration = pj.at("n_calibration").get<std::size_t>();
        p.n_validation = pj.at("n_validation").get<std::size_t>();
        p.n_test = pj.at("n_test").get<std::size_t>();
        p.alignment_split = pj.at("alignment_split").get<std::string>();
        p.alignment_accuracy = pj.at("alignment_accuracy").get<double>();
        p.alignment_target = pj.at("alignment_target").get<double>();
        p.alignment_target_clipped = pj.at("alignment_target_clipped").get<bool>();
        p.alignment_residual = pj.at("alignment_residual").get<double>();
        p.alignment_iterations = pj.at("alignment_iterations").get<std::size_t>();
        for (const auto& t : pj.at("tau_search")) {
            p.tau_search.push_back({t.at("tau").get<double>(), t.at("validation_nll").get<double>()});
        }
        p.head_iterations = pj.at("head_iterations").get<std::size_t>();
        p.head_best_iteration = pj.at("head_best_iteration").get<std::size_t>();
        if (!pj.at("timestamp").is_null()) {
            p.timestamp = pj.at("timestamp").get<std::string>();
        }
        for (const auto& e : pj.at("validation_predictions")) {
            p.validation_predictions.emplace_back(e.at(0).get<std::string>(), e.at(1).get<double>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(0, "artifact", e.what());
    } catch (const ConfigError& e) {
        throw ParseError(0, "features", e.what());
    }
    return a;
}

inline void save_artifact(const CalibratorArtifact& a, const std::filesystem::path& path) {
    write_text_file(path, to_json(a).dump(2) + "\n");
}

inline CalibratorArtifact load_artifact(const std::filesystem::path& path) {
    const auto text = read_text_file(path);
    auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) {
        throw ParseError(0, "artifact", "malformed JSON in " + path.string());
    }
    return artifact_from_json(j);
}

} // namespace dualconf
