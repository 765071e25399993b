#pragma once

// Answer-protocol prompt rendering and verbalized-confidence parsing.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dualconf/error.hpp"
#include "dualconf/numeric.hpp"

namespace dualconf {

struct PromptTemplate {
    std::string text;
    // Option labels; the first k are used for a k-option question.
    std::vector<std::string> labels;

    static std::vector<std::string> numeric_labels(std::size_t k) {
        std::vector<std::string> out;
        for (std::size_t i = 1; i <= k; ++i) {
            out.push_back(std::to_string(i));
        }
        return out;
    }

    static std::vector<std::string> letter_labels(std::size_t k) {
        if (k > 26) {
            throw ConfigError("letter alphabet supports at most 26 options");
        }
        std::vector<std::string> out;
        for (std::size_t i = 0; i < k; ++i) {
            out.emplace_back(1, static_cast<char>('A' + i));
        }
        return out;
    }

    static const char* default_text() {
        return "You are given an image and a multiple-choice question with {k} options.\n"
               "Question: {question}\n"
               "Options:\n"
               "{options}\n"
               "First, output exactly one option label ({labels}) as your final answer.\n"
               "Then, output a JSON object only with keys {{keys}} and numeric values in {0,...,100} "
               "indicating your confidence percentage for each option.\n"
               "Do not include any additional text.\n"
               "Final answer:";
    }

    static PromptTemplate numeric_default(std::size_t max_k = 26) {
        return {default_text(), numeric_labels(max_k)};
    }

    static PromptTemplate letter_default(std::size_t max_k = 26) {
        return {default_text(), letter_labels(max_k)};
    }
};

namespace detail {

inline std::string join(std::span<const std::string> items, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i != 0) {
            out += sep;
        }
        out += items[i];
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) {
        s.remove_prefix(1);
    }
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) {
        s.remove_suffix(1);
    }
    return s;
}

inline bool iequals(std::string_view a, std::string_view b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
               return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
           });
}

} // namespace detail

// Substitutes {question}, {options}, {k}, {labels} and {keys} in a single pass
// over the template; text coming from the question or options is never rescanned.
inline std::string render_prompt(std::string_view question, std::span<const std::string> options,
                                  const PromptTemplate& tmpl) {
    const std::size_t k = options.size();
    if (k < 2) {
        throw UsageError("render_prompt: need at least 2 options, got " + std::to_string(k));
    }
    if (tmpl.labels.size() < k) {
        throw ConfigError("label alphabet has " + std::to_string(tmpl.labels.size()) + " labels but question has " +
                          std::to_string(k) + " options");
    }
    for (const char* required : {"{question}", "{options}", "{k}"}) {
        if (tmpl.text.find(required) == std::string::npos) {
            throw ConfigError(std::string("prompt template is missing placeholder ") + required);
        }
    }

    const std::span<const std::string> labels(tmpl.labels.data(), k);
    std::string options_block;
    for (std::size_t i = 0; i < k; ++i) {
        if (i != 0) {
            options_block += '\n';
        }
        options_block += labels[i];
        options_block += ". ";
        options_block += options[i];
    }
    const auto keys = PromptTemplate::numeric_labels(k);

    const std::pair<std::string_view, std::string> subs[] = {
        {"{question}", std::string(question)},
        {"{options}", options_block},
        {"{k}", std::to_string(k)},
        {"{labels}", detail::join(labels, ", ")},
        {"{keys}", detail::join(keys, ", ")},
    };

    std::string out;
    std::string_view rest = tmpl.text;
    while (!rest.empty()) {
        bool matched = false;
        if (rest.front() == '{') {
            for (const auto& [name, value] : subs) {
                if (rest.substr(0, name.size()) == name) {
                    out += value;
                    rest.remove_prefix(name.size());
                    matched = true;
                    break;
                }
            }
        }
        if (!matched) {
            out += rest.front();
            rest.remove_prefix(1);
        }
    }
    return out;
}

enum class VerbalSource { json, regex_fallback, all_imputed };

inline const char* to_string(VerbalSource s) {
    switch (s) {
    case VerbalSource::json:
        return "json";
    case VerbalSource::regex_fallback:
        return "regex_fallback";
    case VerbalSource::all_imputed:
        return "all_imputed";
    }
    return "unknown";
}

struct ParsedVerbal {
    std::vector<double> values;
    std::vector<bool> missing_mask;
    VerbalSource source = VerbalSource::all_imputed;
};

inline constexpr double kImputedVerbal = 0.5;

inline ParsedVerbal default_verbal(std::size_t k) {
    if (k < 2) {
        throw UsageError("default_verbal: k must be at least 2");
    }
    return {std::vector<double>(k, kImputedVerbal), std::vector<bool>(k, true), VerbalSource::all_imputed};
}

namespace detail {

// Percent value -> [0,1]: clip to [0,100], truncate to 4 decimals, divide by
// 100. Computed as (ten-thousandths count) / 1e6 so the result is the double
// nearest the decimal value.
inline double normalize_percent(double v) {
    v = std::clamp(v, 0.0, 100.0);
    // The nudge keeps values like 28.999999999999996 (= 0.29 * 100) at 29.
    const double ten_thousandths = std::trunc(v * 1e4 + 1e-6);
    return ten_thousandths / 1e6;
}

inline std::optional<double> parse_number(std::string_view s) {
    s = trim(s);
    if (!s.empty() && s.back() == '%') {
        s.remove_suffix(1);
        s = trim(s);
    }
    if (s.empty()) {
        return std::nullopt;
    }
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        return std::nullopt;
    }
    return v;
}

inline std::optional<std::size_t> resolve_option_key(std::string_view key, std::size_t k,
                                                     std::span<const std::string> labels) {
    key = trim(key);
    if (key.empty()) {
        return std::nullopt;
    }
    if (key.size() <= 9 && std::all_of(key.begin(), key.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        std::size_t n = 0;
        std::from_chars(key.data(), key.data() + key.size(), n);
        if (n >= 1 && n <= k) {
            return n - 1;
        }
        return std::nullopt;
    }
    const std::size_t usable = std::min(k, labels.size());
    for (std::size_t i = 0; i < usable; ++i) {
        if (key == labels[i] || (labels[i].size() == 1 && iequals(key, labels[i]))) {
            return i;
        }
    }
    return std::nullopt;
}

// End offset (exclusive) of the brace-balanced object starting at `open`, honoring strings.
inline std::optional<std::size_t> matching_brace(std::string_view text, std::size_t open) {
    int depth = 0;
    bool in_string = false;
    bool escaped = false;
    for (std::size_t i = open; i < text.size(); ++i) {
        const char c = text[i];
        if (in_string) {
            if (escaped) {
                escaped = false;
            } else if (c == '\\') {
                escaped = true;
            } else if (c == '"') {
                in_string = false;
            }
            continue;
        }
        if (c == '"') {
            in_string = true;
        } else if (c == '{') {
            ++depth;
        } else if (c == '}') {
            if (--depth == 0) {
                return i + 1;
            }
        }
    }
    return std::nullopt;
}

inline bool parse_first_json_object(std::string_view text, std::size_t k, std::span<const std::string> labels,
                                    std::vector<std::optional<double>>& out) {
    for (std::size_t open = text.find('{'); open != std::string_view::npos; open = text.find('{', open + 1)) {
        const auto end = matching_brace(text, open);
        if (!end) {
            continue;
        }
        const auto candidate = text.substr(open, *end - open);
        auto obj = nlohmann::json::parse(candidate.begin(), candidate.end(), nullptr, false);
        if (obj.is_discarded() || !obj.is_object()) {
            continue;
        }
        std::vector<std::optional<double>> found(k);
        bool any = false;
        for (const auto& [key, val] : obj.items()) {
            const auto idx = resolve_option_key(key, k, labels);
            if (!idx || found[*idx]) {
                continue;
            }
            std::optional<double> number;
            if (val.is_number()) {
                number = val.get<double>();
            } else if (val.is_string()) {
                number = parse_number(val.get_ref<const std::string&>());
            }
            if (!number || std::isnan(*number)) {
                continue;
            }
            found[*idx] = normalize_percent(*number);
            any = true;
        }
        if (any) {
            out = std::move(found);
            return true;
        }
    }
    return false;
}

inline std::string regex_escape(std::string_view s) {
    static const std::string_view special = R"(\^$.|?*+()[]{}/-)";
    std::string out;
    for (char c : s) {
        if (special.find(c) != std::string_view::npos) {
            out += '\\';
        }
        out += c;
    }
    return out;
}

inline bool regex_extract(std::string_view text, std::size_t k, std::span<const std::string> labels,
                          std::vector<std::optional<double>>& out) {
    std::vector<std::string> idents = PromptTemplate::numeric_labels(k);
    for (std::size_t i = 0; i < std::min(k, labels.size()); ++i) {
        if (!labels[i].empty() && std::find(idents.begin(), idents.end(), labels[i]) == idents.end()) {
            idents.push_back(labels[i]);
        }
    }
    std::sort(idents.begin(), idents.end(), [](const std::string& a, const std::string& b) {
        return a.size() != b.size() ? a.size() > b.size() : a < b;
    });
    std::string alternation;
    for (const auto& id : idents) {
        if (!alternation.empty()) {
            alternation += '|';
        }
        alternation += regex_escape(id);
    }
    // Identifier, then up to 12 non-digit characters, then the number.
    const std::regex pattern("(?:^|[^A-Za-z0-9])(" + alternation +
                             ")(?![A-Za-z0-9])[^0-9]{0,12}?([0-9]+(?:\\.[0-9]+)?)");

    std::vector<std::optional<double>> found(k);
    bool any = false;
    try {
        const std::string haystack(text);
        for (auto it = std::sregex_iterator(haystack.begin(), haystack.end(), pattern); it != std::sregex_iterator();
             ++it) {
            const auto idx = resolve_option_key((*it)[1].str(), k, labels);
            const auto number = parse_number((*it)[2].str());
            if (!idx || !number || found[*idx] || *number > 150.0) {
                continue;
            }
            found[*idx] = normalize_percent(*number);
            any = true;
        }
    } catch (const std::regex_error&) {
        return false;
    }
    if (any) {
        out = std::move(found);
    }
    return any;
}

} // namespace detail

// Parses a model response into per-option verbalized confidences in [0,1].
// Never throws on content: malformed input degrades to regex extraction, then
// to neutral imputation. Values are never renormalized.
inline ParsedVerbal parse_verbal_response(std::string_view text, std::size_t k,
                                          std::span<const std::string> labels = {}) {
    if (k < 2) {
        throw UsageError("parse_verbal_response: k must be at least 2");
    }
    std::vector<std::optional<double>> found;
    VerbalSource source = VerbalSource::all_imputed;
    if (detail::parse_first_json_object(text, k, labels, found)) {
        source = VerbalSource::json;
    } else if (detail::regex_extract(text, k, labels, found)) {
        source = VerbalSource::regex_fallback;
    } else {
        return default_verbal(k);
    }

    ParsedVerbal out;
    out.source = source;
    out.values.resize(k);
    out.missing_mask.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
        out.values[i] = found[i].value_or(kImputedVerbal);
        out.missing_mask[i] = !found[i].has_value();
    }
    return out;
}

// Canonical JSON response text for a parsed vector: 1-based keys, percentages,
// imputed entries omitted. Parsing this text reproduces the values and mask.
inline std::string to_canonical_response(const ParsedVerbal& parsed) {
    nlohmann::ordered_json obj = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < parsed.values.size(); ++i) {
        if (parsed.missing_mask[i]) {
            continue;
        }
        obj[std::to_string(i + 1)] = std::round(parsed.values[i] * 1e6) / 1e4;
        // round(v * 1e6) recovers the ten-thousandths count exactly for parsed values.
    }
    return obj.dump();
}

} // namespace dualconf
