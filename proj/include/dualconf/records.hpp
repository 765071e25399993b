#pragma once

// Record model, token-channel normalization, dataset splitting and JSONL I/O.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "dualconf/error.hpp"
#include "dualconf/numeric.hpp"
#include "dualconf/parsing.hpp"

namespace dualconf {

inline constexpr double kSimplexTolerance = 1e-9;

// Meta key set when some option label had no returned log-probability.
inline constexpr const char* kMetaTokenImputed = "token_imputed_labels";
inline constexpr const char* kMetaVerbalSource = "verbal_source";

struct ConfidenceRecord {
    std::string id;
    std::size_t k = 0;
    std::optional<std::vector<double>> option_logprobs;
    std::vector<double> token_probs;
    std::vector<double> verbal;
    std::vector<bool> verbal_missing_mask;
    std::optional<std::string> verbal_raw;
    std::size_t gold_index = 0;
    std::size_t predicted_index = 0;
    bool correct = false;
    std::map<std::string, std::string> meta;

    friend bool operator==(const ConfidenceRecord&, const ConfidenceRecord&) = default;
};

// Softmax with max subtraction.
inline std::vector<double> normalize_token_scores(std::span<const double> logprobs, const std::string& record_id = "") {
    if (logprobs.size() < 2) {
        throw InvalidRecordError(record_id, "need at least 2 option log-probabilities");
    }
    for (double z : logprobs) {
        if (!std::isfinite(z)) {
            throw InvalidRecordError(record_id, "non-finite option log-probability");
        }
    }
    const double peak = *std::max_element(logprobs.begin(), logprobs.end());
    std::vector<double> out(logprobs.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logprobs.size(); ++i) {
        out[i] = std::exp(logprobs[i] - peak);
        total += out[i];
    }
    for (double& p : out) {
        p /= total;
    }
    return out;
}

// Lowest index attaining the maximum.
inline std::size_t predicted_option(std::span<const double> token_probs, const std::string& record_id = "") {
    if (token_probs.empty()) {
        throw InvalidRecordError(record_id, "empty token probability vector");
    }
    return static_cast<std::size_t>(std::max_element(token_probs.begin(), token_probs.end()) - token_probs.begin());
}

// Fills log-probabilities for labels the provider did not return with
// min(returned) - 10. Returns the indices that were imputed.
inline std::vector<std::size_t> impute_missing_logprobs(std::vector<std::optional<double>>& logprobs) {
    std::vector<std::size_t> missing;
    double lowest = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < logprobs.size(); ++i) {
        if (logprobs[i]) {
            lowest = std::min(lowest, *logprobs[i]);
        } else {
            missing.push_back(i);
        }
    }
    if (missing.size() == logprobs.size()) {
        throw InvalidRecordError("", "no option log-probabilities were returned");
    }
    for (std::size_t i : missing) {
        logprobs[i] = lowest - 10.0;
    }
    return missing;
}

// Inputs to build_record; at least one of each channel pair must be present.
struct RecordInput {
    std::string id;
    std::optional<std::size_t> k;
    std::optional<std::vector<double>> option_logprobs;
    std::optional<std::vector<double>> token_probs;
    std::optional<std::vector<double>> verbal;
    std::optional<std::string> verbal_raw;
    std::optional<std::vector<bool>> verbal_missing_mask;
    std::size_t gold_index = 0;
    std::map<std::string, std::string> meta;
};

// Validates a record and derives token_probs, predicted_index and correct.
inline ConfidenceRecord build_record(RecordInput in, std::span<const std::string> labels = {}) {
    const auto& id = in.id;
    if (id.empty()) {
        throw InvalidRecordError(id, "empty id");
    }
    ConfidenceRecord rec;
    rec.id = id;
    if (!in.option_logprobs && !in.token_probs) {
        throw InvalidRecordError(id, "one of option_logprobs or token_probs is required");
    }
    if (in.option_logprobs) {
        rec.token_probs = normalize_token_scores(*in.option_logprobs, id);
        if (in.token_probs) {
            if (in.token_probs->size() != rec.token_probs.size()) {
                throw InvalidRecordError(id, "token_probs and option_logprobs differ in length");
            }
            for (std::size_t i = 0; i < rec.token_probs.size(); ++i) {
                if (!(std::abs((*in.token_probs)[i] - rec.token_probs[i]) <= kSimplexTolerance)) {
                    throw InvalidRecordError(id, "token_probs disagree with softmax(option_logprobs)");
                }
            }
        }
        rec.option_logprobs = std::move(in.option_logprobs);
    } else {
        rec.token_probs = std::move(*in.token_probs);
        double total = 0.0;
        for (double p : rec.token_probs) {
            if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
                throw InvalidRecordError(id, "token_probs entry outside [0,1]");
            }
            total += p;
        }
        if (std::abs(total - 1.0) > kSimplexTolerance) {
            throw InvalidRecordError(id, "token_probs do not sum to 1");
        }
    }
    rec.k = rec.token_probs.size();
    if (rec.k < 2) {
        throw InvalidRecordError(id, "k must be at least 2");
    }
    if (in.k && *in.k != rec.k) {
        throw InvalidRecordError(id, "k=" + std::to_string(*in.k) + " but channel has " + std::to_string(rec.k) +
                                         " entries");
    }

    if (in.verbal) {
        if (in.verbal->size() != rec.k) {
            throw InvalidRecordError(id, "verbal has wrong length");
        }
        for (double s : *in.verbal) {
            if (!(s >= 0.0 && s <= 1.0)) {
                throw InvalidRecordError(id, "verbal entry outside [0,1]");
            }
        }
        rec.verbal = std::move(*in.verbal);
        if (in.verbal_missing_mask) {
            if (in.verbal_missing_mask->size() != rec.k) {
                throw InvalidRecordError(id, "verbal_missing_mask has wrong length");
            }
            rec.verbal_missing_mask = std::move(*in.verbal_missing_mask);
        } else {
            rec.verbal_missing_mask.assign(rec.k, false);
        }
    } else if (in.verbal_raw) {
        auto parsed = parse_verbal_response(*in.verbal_raw, rec.k, labels);
        rec.verbal = std::move(parsed.values);
        rec.verbal_missing_mask = std::move(parsed.missing_mask);
        in.meta[kMetaVerbalSource] = to_string(parsed.source);
    } else {
        throw InvalidRecordError(id, "one of verbal or verbal_raw is required");
    }
    rec.verbal_raw = std::move(in.verbal_raw);

    if (in.gold_index >= rec.k) {
        throw InvalidRecordError(id, "gold_index out of range");
    }
    rec.gold_index = in.gold_index;
    rec.predicted_index = predicted_option(rec.token_probs, id);
    rec.correct = rec.predicted_index == rec.gold_index;
    rec.meta = std::move(in.meta);
    return rec;
}

// ---------------------------------------------------------------------------
// Splits

enum class Split { calibration, validation, test };

inline const char* to_string(Split s) {
    switch (s) {
    case Split::calibration:
        return "calibration";
    case Split::validation:
        return "validation";
    case Split::test:
        return "test";
    }
    return "unknown";
}

struct SplitConfig {
    double calibration_fraction = 0.5;
    double validation_fraction = 0.2;
    std::uint64_t seed = 0;
    std::optional<std::size_t> folds;
};

struct SplitEntry {
    Split split = Split::test;
    std::optional<std::size_t> fold;
};

struct SplitAssignment {
    std::map<std::string, SplitEntry> entries;

    std::vector<std::string> ids(Split s) const {
        std::vector<std::string> out;
        for (const auto& [id, e] : entries) {
            if (e.split == s) {
                out.push_back(id);
            }
        }
        return out;
    }

    std::size_t count(Split s) const {
        return static_cast<std::size_t>(
            std::count_if(entries.begin(), entries.end(), [s](const auto& kv) { return kv.second.split == s; }));
    }

    const SplitEntry& at(const std::string& id) const {
        auto it = entries.find(id);
        if (it == entries.end()) {
            throw UsageError("record '" + id + "' has no split assignment");
        }
        return it->second;
    }
};

inline std::size_t fraction_count(std::size_t n, double fraction) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * fraction + 1e-9));
}

// Ids are sorted before shuffling, so the assignment depends only on the id set and the seed.
inline SplitAssignment split_dataset(std::span<const std::string> record_ids, const SplitConfig& cfg) {
    const double cal = cfg.calibration_fraction;
    const double val = cfg.validation_fraction;
    if (!(cal > 0.0) || !(val > 0.0) || cal + val > 1.0 + 1e-12) {
        throw ConfigError("split fractions must be positive with calibration + validation <= 1");
    }
    if (cfg.folds && *cfg.folds < 2) {
        throw ConfigError("folds must be at least 2");
    }
    std::vector<std::string> ids(record_ids.begin(), record_ids.end());
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
        throw InvalidRecordError(*std::adjacent_find(ids.begin(), ids.end()), "duplicate record id");
    }
    std::mt19937_64 rng(cfg.seed);
    std::shuffle(ids.begin(), ids.end(), rng);

    const std::size_t n = ids.size();
    // Rounding the pool first keeps cal + val = 1 free of stray test records.
    const std::size_t pool = std::min(fraction_count(n, cal + val), n);
    const std::size_t n_cal = std::min(fraction_count(n, cal), pool);
    if (cfg.folds && pool < *cfg.folds) {
        throw ConfigError("calibration+validation pool of " + std::to_string(pool) + " records is smaller than " +
                          std::to_string(*cfg.folds) + " folds");
    }

    SplitAssignment out;
    for (std::size_t i = 0; i < n; ++i) {
        SplitEntry e;
        e.split = i < n_cal ? Split::calibration : (i < pool ? Split::validation : Split::test);
        out.entries.emplace(ids[i], e);
    }
    if (cfg.folds) {
        const std::size_t f = *cfg.folds;
        const std::size_t base = pool / f;
        const std::size_t extra = pool % f;
        std::size_t pos = 0;
        for (std::size_t fold = 0; fold < f; ++fold) {
            const std::size_t size = base + (fold < extra ? 1 : 0);
            for (std::size_t j = 0; j < size; ++j, ++pos) {
                out.entries[ids[pos]].fold = fold;
            }
        }
    }
    return out;
}

inline std::vector<std::string> record_ids(std::span<const ConfidenceRecord> records) {
    std::vector<std::string> ids;
    ids.reserve(records.size());
    for (const auto& r : records) {
        ids.push_back(r.id);
    }
    return ids;
}

// ---------------------------------------------------------------------------
// JSONL

inline nlohmann::ordered_json to_json(const ConfidenceRecord& r) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["k"] = r.k;
    if (r.option_logprobs) {
        j["option_logprobs"] = *r.option_logprobs;
        j["token_probs"] = nullptr;
    } else {
        j["option_logprobs"] = nullptr;
        j["token_probs"] = r.token_probs;
    }
    j["verbal"] = r.verbal;
    j["verbal_raw"] = r.verbal_raw ? nlohmann::ordered_json(*r.verbal_raw) : nlohmann::ordered_json(nullptr);
    j["verbal_missing_mask"] = r.verbal_missing_mask;
    j["gold_index"] = r.gold_index;
    j["meta"] = r.meta;
    return j;
}

inline std::string to_jsonl_line(const ConfidenceRecord& r) {
    // Invalid UTF-8 in raw responses is replaced rather than rejected.
    return to_json(r).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

namespace detail {

template <class T>
std::optional<T> optional_field(const nlohmann::json& j, const char* name, std::size_t line) {
    auto it = j.find(name);
    if (it == j.end() || it->is_null()) {
        return std::nullopt;
    }
    try {
        return it->get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(line, name, e.what());
    }
}

} // namespace detail

inline ConfidenceRecord parse_record_line(std::string_view text, std::size_t line,
                                          std::span<const std::string> labels = {}) {
    auto j = nlohmann::json::parse(text.begin(), text.end(), nullptr, false);
    if (j.is_discarded()) {
        throw ParseError(line, "<line>", "malformed JSON");
    }
    if (!j.is_object()) {
        throw ParseError(line, "<line>", "expected a JSON object");
    }
    RecordInput in;
    auto id = detail::optional_field<std::string>(j, "id", line);
    if (!id) {
        throw ParseError(line, "id", "missing required field");
    }
    in.id = *id;
    auto gold = j.find("gold_index");
    if (gold == j.end() || gold->is_null()) {
        throw ParseError(line, "gold_index", "missing required field");
    }
    if (!gold->is_number_integer() || gold->get<long long>() < 0) {
        throw ParseError(line, "gold_index", "must be a non-negative integer");
    }
    in.gold_index = gold->get<std::size_t>();
    auto k = j.find("k");
    if (k != j.end() && !k->is_null()) {
        if (!k->is_number_integer() || k->get<long long>() < 2) {
            throw ParseError(line, "k", "must be an integer >= 2");
        }
        in.k = k->get<std::size_t>();
    }
    in.option_logprobs = detail::optional_field<std::vector<double>>(j, "option_logprobs", line);
    in.token_probs = detail::optional_field<std::vector<double>>(j, "token_probs", line);
    in.verbal = detail::optional_field<std::vector<double>>(j, "verbal", line);
    in.verbal_raw = detail::optional_field<std::string>(j, "verbal_raw", line);
    in.verbal_missing_mask = detail::optional_field<std::vector<bool>>(j, "verbal_missing_mask", line);
    if (auto meta = detail::optional_field<std::map<std::string, std::string>>(j, "meta", line)) {
        in.meta = std::move(*meta);
    }
    if (!in.option_logprobs && !in.token_probs) {
        throw ParseError(line, "option_logprobs", "one of option_logprobs or token_probs is required");
    }
    if (!in.verbal && !in.verbal_raw) {
        throw ParseError(line, "verbal", "one of verbal or verbal_raw is required");
    }
    try {
        return build_record(std::move(in), labels);
    } catch (const InvalidRecordError& e) {
        throw ParseError(line, "<record>", e.what());
    }
}

struct LineIssue {
    std::size_t line = 0;
    std::string message;
};

struct LoadResult {
    std::vector<ConfidenceRecord> records;
    std::vector<LineIssue> skipped;
};

// Strict mode throws on the first bad line; lenient mode skips and reports it.
inline LoadResult read_records(std::istream& in, bool strict = true, std::span<const std::string> labels = {}) {
    LoadResult out;
    std::unordered_set<std::string> seen;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (!text.empty() && text.back() == '\r') {
            text.pop_back();
        }
        if (detail::trim(text).empty()) {
            continue;
        }
        try {
            auto rec = parse_record_line(text, line, labels);
            if (!seen.insert(rec.id).second) {
                throw ParseError(line, "id", "duplicate id '" + rec.id + "'");
            }
            out.records.push_back(std::move(rec));
        } catch (const ParseError& e) {
            if (strict) {
                throw;
            }
            out.skipped.push_back({line, e.what()});
        }
    }
    return out;
}

inline LoadResult load_records(const std::string& path, bool strict = true, std::span<const std::string> labels = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw UsageError("cannot open records file: " + path);
    }
    return read_records(in, strict, labels);
}

inline void write_records(std::ostream& out, std::span<const ConfidenceRecord> records) {
    for (const auto& r : records) {
        out << to_jsonl_line(r) << '\n';
    }
}

inline void save_records(std::span<const ConfidenceRecord> records, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw UsageError("cannot write records file: " + path);
    }
    write_records(out, records);
    if (!out) {
        throw UsageError("write failed: " + path);
    }
}

} // namespace dualconf
