#pragma once

// MetricReport assembly and its JSON / CSV forms.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualconf/error.hpp"
#include "dualconf/metrics.hpp"
#include "dualconf/numeric.hpp"

namespace dualconf {

inline constexpr const char* kAurcConvention = "trapezoid_with_left_rectangle";

struct MetricReport {
    std::string channel;
    std::size_t n = 0;
    std::size_t n_bins = 10;
    double acc = 0.0;
    double ece = 0.0;
    double mean_confidence = 0.0;
    std::optional<double> auroc;
    std::optional<double> auprc;
    std::optional<double> auprc_n;
    double aurc = 0.0;
    std::vector<ReliabilityBin> bins;
    std::vector<RiskCoveragePoint> rc_points;
    std::map<std::string, MetricReport> groups;

    friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

inline MetricReport compute_report(std::span<const double> conf, std::span<const int> correct,
                                   std::size_t n_bins = 10, std::string channel = "") {
    MetricReport r;
    r.channel = std::move(channel);
    r.n = conf.size();
    r.n_bins = n_bins;
    r.bins = reliability_bins(conf, correct, n_bins);
    r.ece = ece_from_bins(r.bins, r.n);
    r.acc = accuracy(correct);
    double total = 0.0;
    for (double c : conf) {
        total += c;
    }
    r.mean_confidence = total / static_cast<double>(r.n);
    r.auroc = auroc(conf, correct);
    r.auprc = auprc(conf, correct);
    r.auprc_n = auprc_n(conf, correct);
    r.rc_points = risk_coverage(conf, correct);
    r.aurc = aurc(r.rc_points);
    return r;
}

namespace detail {

inline nlohmann::ordered_json optional_number(const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

inline std::optional<double> read_optional_number(const nlohmann::json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) {
        return std::nullopt;
    }
    return it->get<double>();
}

} // namespace detail

inline nlohmann::ordered_json to_json(const MetricReport& r) {
    nlohmann::ordered_json j;
    j["channel"] = r.channel;
    j["n"] = r.n;
    j["acc"] = r.acc;
    j["ece"] = r.ece;
    j["mean_confidence"] = r.mean_confidence;
    j["auroc"] = detail::optional_number(r.auroc);
    j["auprc"] = detail::optional_number(r.auprc);
    j["auprc_n"] = detail::optional_number(r.auprc_n);
    j["aurc"] = r.aurc;
    j["aurc_convention"] = kAurcConvention;
    j["n_bins"] = r.n_bins;
    auto& bins = j["bins"] = nlohmann::ordered_json::array();
    for (const auto& b : r.bins) {
        bins.push_back({{"lower", b.lower},
                        {"upper", b.upper},
                        {"count", b.count},
                        {"mean_confidence", detail::optional_number(b.mean_confidence)},
                        {"empirical_accuracy", detail::optional_number(b.empirical_accuracy)}});
    }
    auto& rc = j["rc_points"] = nlohmann::ordered_json::array();
    for (const auto& p : r.rc_points) {
        rc.push_back({p.coverage, p.risk});
    }
    if (!r.groups.empty()) {
        auto& groups = j["groups"] = nlohmann::ordered_json::object();
        for (const auto& [key, g] : r.groups) {
            groups[key] = to_json(g);
        }
    }
    return j;
}

inline MetricReport metric_report_from_json(const nlohmann::json& j) {
    try {
        MetricReport r;
        r.channel = j.value("channel", "");
        r.n = j.at("n").get<std::size_t>();
        r.n_bins = j.at("n_bins").get<std::size_t>();
        r.acc = j.at("acc").get<double>();
        r.ece = j.at("ece").get<double>();
        r.mean_confidence = j.at("mean_confidence").get<double>();
        r.auroc = detail::read_optional_number(j, "auroc");
        r.auprc = detail::read_optional_number(j, "auprc");
        r.auprc_n = detail::read_optional_number(j, "auprc_n");
        r.aurc = j.at("aurc").get<double>();
        for (const auto& b : j.at("bins")) {
            ReliabilityBin bin;
            bin.lower = b.at("lower").get<double>();
            bin.upper = b.at("upper").get<double>();
            bin.count = b.at("count").get<std::size_t>();
            bin.mean_confidence = detail::read_optional_number(b, "mean_confidence");
            bin.empirical_accuracy = detail::read_optional_number(b, "empirical_accuracy");
            r.bins.push_back(bin);
        }
        for (const auto& p : j.at("rc_points")) {
            r.rc_points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
        }
        if (auto it = j.find("groups"); it != j.end()) {
            for (const auto& [key, g] : it->items()) {
                r.groups.emplace(key, metric_report_from_json(g));
            }
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(0, "metrics", e.what());
    }
}

inline std::string bins_csv(const MetricReport& r) {
    std::ostringstream out;
    out << "lower,upper,count,mean_confidence,empirical_accuracy\n";
    for (const auto& b : r.bins) {
        out << format_double(b.lower) << ',' << format_double(b.upper) << ',' << b.count << ','
            << (b.mean_confidence ? format_double(*b.mean_confidence) : "") << ','
            << (b.empirical_accuracy ? format_double(*b.empirical_accuracy) : "") << '\n';
    }
    return out.str();
}

inline std::string risk_coverage_csv(const MetricReport& r) {
    std::ostringstream out;
    out << "alpha,risk\n";
    for (const auto& p : r.rc_points) {
        out << format_double(p.coverage) << ',' << format_double(p.risk) << '\n';
    }
    return out.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw UsageError("cannot open for writing: " + path.string());
    }
    out << text;
    if (!out) {
        throw UsageError("write failed: " + path.string());
    }
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw UsageError("cannot open for reading: " + path.string());
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

struct ReportFiles {
    std::filesystem::path metrics_json;
    std::filesystem::path bins_csv;
    std::filesystem::path risk_coverage_csv;
};

// Writes metrics.json, reliability_bins.csv and risk_coverage.csv.
inline ReportFiles write_report(const MetricReport& r, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) {
        throw UsageError("cannot create report directory " + out_dir.string() + ": " + ec.message());
    }
    ReportFiles files{out_dir / "metrics.json", out_dir / "reliability_bins.csv", out_dir / "risk_coverage.csv"};
    write_text_file(files.metrics_json, to_json(r).dump(2) + "\n");
    write_text_file(files.bins_csv, bins_csv(r));
    write_text_file(files.risk_coverage_csv, risk_coverage_csv(r));
    return files;
}

} // namespace dualconf
