#pragma once

// Dual-channel collection from a chat-completions endpoint with per-token
// log-probabilities. One request per question yields the answer label (token
// channel) followed by the confidence JSON (verbal channel).

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "dualconf/error.hpp"
#include "dualconf/numeric.hpp"
#include "dualconf/parsing.hpp"
#include "dualconf/records.hpp"

namespace dualconf {

struct Question {
    std::string id;
    std::string question;
    std::vector<std::string> options;
    std::size_t gold_index = 0;
    std::map<std::string, std::string> meta;
};

inline std::vector<Question> read_questions(std::istream& in) {
    std::vector<Question> out;
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
        auto j = nlohmann::json::parse(text, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            throw ParseError(line, "<line>", "malformed JSON object");
        }
        Question q;
        try {
            for (const char* field : {"id", "question", "options", "gold_index"}) {
                if (!j.contains(field) || j[field].is_null()) {
                    throw ParseError(line, field, "missing required field");
                }
            }
            q.id = j.at("id").get<std::string>();
            q.question = j.at("question").get<std::string>();
            q.options = j.at("options").get<std::vector<std::string>>();
            if (!j.at("gold_index").is_number_integer() || j.at("gold_index").get<long long>() < 0) {
                throw ParseError(line, "gold_index", "must be a non-negative integer");
            }
            q.gold_index = j.at("gold_index").get<std::size_t>();
            if (j.contains("meta") && !j.at("meta").is_null()) {
                q.meta = j.at("meta").get<std::map<std::string, std::string>>();
            }
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(line, "<line>", e.what());
        }
        if (q.options.size() < 2) {
            throw ParseError(line, "options", "need at least 2 options");
        }
        if (q.gold_index >= q.options.size()) {
            throw ParseError(line, "gold_index", "out of range for " + std::to_string(q.options.size()) + " options");
        }
        out.push_back(std::move(q));
    }
    return out;
}

inline std::vector<Question> load_questions(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw UsageError("cannot open questions file: " + path);
    }
    return read_questions(in);
}

struct CollectionConfig {
    std::string endpoint = "http://127.0.0.1:8000/v1/chat/completions";
    std::string model;
    double temperature = 0.0;
    std::size_t max_parallel = 4;
    double timeout_seconds = 60.0;
    std::size_t retries = 2;
    std::size_t top_logprobs = 20;
    std::size_t max_tokens = 128;
    std::string api_key_env = "OPENAI_API_KEY";
    // Label request with log-probabilities first, confidence request second.
    bool two_pass = false;

    void validate() const {
        if (max_parallel < 1) {
            throw ConfigError("max_parallel must be at least 1");
        }
        if (!(temperature >= 0.0)) {
            throw ConfigError("temperature must be non-negative");
        }
        if (top_logprobs < 1) {
            throw ConfigError("top_logprobs must be at least 1");
        }
        if (!(timeout_seconds > 0.0)) {
            throw ConfigError("timeout must be positive");
        }
    }
};

struct Endpoint {
    std::string scheme_host_port;
    std::string path;
};

inline Endpoint parse_endpoint(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) {
        throw ConfigError("endpoint must be an http(s) URL: " + url);
    }
    const auto scheme = url.substr(0, scheme_end);
    if (scheme != "http" && scheme != "https") {
        throw ConfigError("unsupported endpoint scheme '" + scheme + "'");
    }
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) {
        return {url, "/v1/chat/completions"};
    }
    return {url.substr(0, path_start), url.substr(path_start)};
}

inline nlohmann::json chat_request_body(const CollectionConfig& cfg, const std::string& prompt, bool with_logprobs,
                                        std::size_t max_tokens) {
    nlohmann::json body;
    body["model"] = cfg.model;
    body["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", prompt}}});
    body["temperature"] = cfg.temperature;
    body["max_tokens"] = max_tokens;
    if (with_logprobs) {
        body["logprobs"] = true;
        body["top_logprobs"] = cfg.top_logprobs;
    }
    return body;
}

// Token text reduced to a bare label: surrounding whitespace and bracketing
// punctuation removed, so " A", "(A" and "A." all read as "A".
inline std::string normalize_label_token(std::string_view token) {
    static constexpr std::string_view strip = " \t\r\n()[].:*\"'`";
    while (!token.empty() && strip.find(token.front()) != std::string_view::npos) {
        token.remove_prefix(1);
    }
    while (!token.empty() && strip.find(token.back()) != std::string_view::npos) {
        token.remove_suffix(1);
    }
    return std::string(token);
}

struct LabelLogprobs {
    std::size_t position = 0;
    // Per option label; unset when the label was not among the returned alternatives.
    std::vector<std::optional<double>> logprobs;
    // Characters of message content up to and including the label token.
    std::size_t content_offset = 0;
};

namespace detail {

inline double log_add(double a, double b) {
    const double hi = std::max(a, b);
    const double lo = std::min(a, b);
    return hi + std::log1p(std::exp(lo - hi));
}

} // namespace detail

// Finds the first generated token that is an option label and reads the
// log-probabilities of all k labels at that position. Token variants that
// normalize to the same label (" A", "A") are combined by log-sum-exp.
inline std::optional<LabelLogprobs> extract_label_logprobs(const nlohmann::json& response,
                                                           std::span<const std::string> labels) {
    const nlohmann::json* content = nullptr;
    try {
        content = &response.at("choices").at(0).at("logprobs").at("content");
    } catch (const nlohmann::json::exception&) {
        return std::nullopt;
    }
    if (!content->is_array()) {
        return std::nullopt;
    }
    auto label_index = [&](const std::string& token) -> std::optional<std::size_t> {
        const auto norm = normalize_label_token(token);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (norm == labels[i]) {
                return i;
            }
        }
        return std::nullopt;
    };

    std::size_t offset = 0;
    for (std::size_t pos = 0; pos < content->size(); ++pos) {
        const auto& entry = (*content)[pos];
        const std::string token = entry.value("token", std::string());
        offset += token.size();
        if (!label_index(token)) {
            continue;
        }
        LabelLogprobs out;
        out.position = pos;
        out.content_offset = offset;
        out.logprobs.assign(labels.size(), std::nullopt);
        std::map<std::string, double> seen_tokens;
        if (entry.contains("logprob") && entry["logprob"].is_number()) {
            seen_tokens[token] = entry["logprob"].get<double>();
        }
        if (entry.contains("top_logprobs") && entry["top_logprobs"].is_array()) {
            for (const auto& alt : entry["top_logprobs"]) {
                if (alt.contains("token") && alt["token"].is_string() && alt.contains("logprob") &&
                    alt["logprob"].is_number()) {
                    seen_tokens.emplace(alt["token"].get<std::string>(), alt["logprob"].get<double>());
                }
            }
        }
        for (const auto& [tok, lp] : seen_tokens) {
            if (!std::isfinite(lp)) {
                continue;
            }
            if (const auto idx = label_index(tok)) {
                auto& slot = out.logprobs[*idx];
                slot = slot ? detail::log_add(*slot, lp) : lp;
            }
        }
        return out;
    }
    return std::nullopt;
}

inline std::optional<std::string> message_content(const nlohmann::json& response) {
    try {
        const auto& msg = response.at("choices").at(0).at("message").at("content");
        if (msg.is_string()) {
            return msg.get<std::string>();
        }
    } catch (const nlohmann::json::exception&) {
    }
    return std::nullopt;
}

struct HttpReply {
    int status = 0;
    std::string body;
};

// Sends one chat request body; throws TransportError on connection failure.
class ChatClient {
public:
    explicit ChatClient(const CollectionConfig& cfg) : endpoint_(parse_endpoint(cfg.endpoint)), client_(endpoint_.scheme_host_port) {
        const auto secs = std::chrono::duration<double>(cfg.timeout_seconds);
        const auto us = std::chrono::duration_cast<std::chrono::microseconds>(secs);
        client_.set_connection_timeout(us);
        client_.set_read_timeout(us);
        client_.set_write_timeout(us);
        if (const char* key = std::getenv(cfg.api_key_env.c_str()); key != nullptr && *key != '\0') {
            client_.set_bearer_token_auth(key);
        }
    }

    HttpReply post(const nlohmann::json& body, const std::string& idempotency_key) {
        httplib::Headers headers{{"Idempotency-Key", idempotency_key}};
        auto res = client_.Post(endpoint_.path, headers, body.dump(), "application/json");
        if (!res) {
            throw TransportError("request failed: " + httplib::to_string(res.error()));
        }
        return {res->status, res->body};
    }

private:
    Endpoint endpoint_;
    httplib::Client client_;
};

struct CollectFailure {
    std::string id;
    std::string reason;
    bool transport = false;
};

struct CollectResult {
    std::vector<ConfidenceRecord> records;
    std::vector<CollectFailure> failures;
};

namespace detail {

struct Attempt {
    std::optional<nlohmann::json> response;
    std::string error;
    bool transport = false;
};

inline bool retryable_status(int status) { return status == 408 || status == 429 || status >= 500; }

inline Attempt post_with_retries(ChatClient& client, const nlohmann::json& body, const std::string& key,
                                 std::size_t retries) {
    Attempt out;
    for (std::size_t attempt = 0; attempt <= retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(50 * attempt));
        }
        try {
            const auto reply = client.post(body, key);
            if (reply.status == 200) {
                auto j = nlohmann::json::parse(reply.body, nullptr, false);
                if (j.is_discarded()) {
                    out.error = "malformed JSON response";
                    out.transport = false;
                    return out;
                }
                out.response = std::move(j);
                return out;
            }
            out.error = "HTTP " + std::to_string(reply.status) + ": " + reply.body.substr(0, 200);
            out.transport = true;
            if (!retryable_status(reply.status)) {
                return out;
            }
        } catch (const TransportError& e) {
            out.error = e.what();
            out.transport = true;
        }
    }
    out.error = "retries exhausted: " + out.error;
    return out;
}

} // namespace detail

// Builds one record from a single-pass response (or from the label response
// plus a separate confidence response in two-pass mode).
inline ConfidenceRecord record_from_responses(const Question& q, const nlohmann::json& label_response,
                                              const std::optional<nlohmann::json>& verbal_response,
                                              std::span<const std::string> labels, const CollectionConfig& cfg) {
    const std::size_t k = q.options.size();
    const std::span<const std::string> option_labels(labels.data(), k);
    auto extracted = extract_label_logprobs(label_response, option_labels);
    if (!extracted) {
        throw InvalidRecordError(q.id, "no option label token with log-probabilities in response");
    }
    const auto imputed = impute_missing_logprobs(extracted->logprobs);

    std::string verbal_text;
    std::string raw;
    if (verbal_response) {
        raw = message_content(*verbal_response).value_or("");
        verbal_text = raw;
    } else {
        raw = message_content(label_response).value_or("");
        verbal_text = raw.size() >= extracted->content_offset ? raw.substr(extracted->content_offset) : raw;
    }
    auto parsed = parse_verbal_response(verbal_text, k, option_labels);

    RecordInput in;
    in.id = q.id;
    in.k = k;
    in.option_logprobs.emplace();
    for (const auto& lp : extracted->logprobs) {
        in.option_logprobs->push_back(*lp);
    }
    in.verbal = parsed.values;
    in.verbal_missing_mask = parsed.missing_mask;
    in.verbal_raw = raw;
    in.gold_index = q.gold_index;
    in.meta = q.meta;
    in.meta["model"] = cfg.model;
    in.meta["temperature"] = format_double(cfg.temperature);
    in.meta["collection_mode"] = cfg.two_pass ? "two_pass" : "single_pass";
    in.meta[kMetaVerbalSource] = to_string(parsed.source);
    if (!imputed.empty()) {
        std::string names;
        for (std::size_t i : imputed) {
            names += (names.empty() ? "" : ",") + option_labels[i];
        }
        in.meta[kMetaTokenImputed] = names;
    }
    return build_record(std::move(in), option_labels);
}

// Issues up to max_parallel concurrent requests. Per-question failures are
// reported, never thrown; output is sorted by id regardless of completion order.
inline CollectResult collect(std::span<const Question> questions, const CollectionConfig& cfg,
                             const PromptTemplate& tmpl) {
    cfg.validate();
    parse_endpoint(cfg.endpoint);
    for (const auto& q : questions) {
        if (tmpl.labels.size() < q.options.size()) {
            throw ConfigError("label alphabet too short for question '" + q.id + "'");
        }
    }
    std::vector<std::optional<ConfidenceRecord>> records(questions.size());
    std::vector<std::optional<CollectFailure>> failures(questions.size());
    std::atomic<std::size_t> next{0};

    auto worker = [&]() {
        ChatClient client(cfg);
        for (std::size_t i = next++; i < questions.size(); i = next++) {
            const auto& q = questions[i];
            try {
                const auto prompt = render_prompt(q.question, q.options, tmpl);
                const std::size_t label_tokens = cfg.two_pass ? 8 : cfg.max_tokens;
                auto first = detail::post_with_retries(client, chat_request_body(cfg, prompt, true, label_tokens),
                                                       q.id, cfg.retries);
                if (!first.response) {
                    failures[i] = CollectFailure{q.id, first.error, first.transport};
                    continue;
                }
                std::optional<nlohmann::json> second;
                if (cfg.two_pass) {
                    auto reply = detail::post_with_retries(
                        client, chat_request_body(cfg, prompt, false, cfg.max_tokens), q.id + "#verbal", cfg.retries);
                    if (!reply.response) {
                        failures[i] = CollectFailure{q.id, reply.error, reply.transport};
                        continue;
                    }
                    second = std::move(reply.response);
                }
                records[i] = record_from_responses(q, *first.response, second, tmpl.labels, cfg);
            } catch (const Error& e) {
                failures[i] = CollectFailure{q.id, e.what(), e.code() == ExitCode::transport};
            } catch (const std::exception& e) {
                failures[i] = CollectFailure{q.id, std::string("unexpected response: ") + e.what(), false};
            }
        }
    };

    const std::size_t n_threads = std::min(cfg.max_parallel, std::max<std::size_t>(questions.size(), 1));
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_threads; ++t) {
        threads.emplace_back(worker);
    }
    for (auto& t : threads) {
        t.join();
    }

    CollectResult out;
    for (auto& r : records) {
        if (r) {
            out.records.push_back(std::move(*r));
        }
    }
    for (auto& f : failures) {
        if (f) {
            out.failures.push_back(std::move(*f));
        }
    }
    std::sort(out.records.begin(), out.records.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    std::sort(out.failures.begin(), out.failures.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return out;
}

} // namespace dualconf
