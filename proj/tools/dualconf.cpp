// dualconf command-line tool: synth, collect, fit, evaluate, report.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dualconf/collect.hpp"
#include "dualconf/pipeline.hpp"
#include "dualconf/records.hpp"
#include "dualconf/report.hpp"
#include "dualconf/synth.hpp"

namespace {

using namespace dualconf;

std::vector<std::string> alphabet(const std::string& name, std::size_t k) {
    if (name == "numeric") {
        return PromptTemplate::numeric_labels(k);
    }
    if (name == "letters") {
        return PromptTemplate::letter_labels(k);
    }
    throw ConfigError("unknown label alphabet '" + name + "' (expected numeric or letters)");
}

struct SynthArgs {
    SyntheticConfig cfg;
    std::string out;
};

struct CollectArgs {
    CollectionConfig cfg;
    std::string questions;
    std::string out;
    std::string failures;
    std::string labels = "numeric";
    std::string template_file;
};

struct FitArgs {
    PipelineConfig cfg;
    std::string records;
    std::string out;
    std::string alignment = "validation";
    std::string feature_set = "full";
    std::string splits_out;
    std::string labels = "numeric";
    std::size_t folds = 0;
    bool lenient = false;
};

struct EvaluateArgs {
    std::string records;
    std::string artifact;
    std::string channel = "calibrated";
    std::string split = "all";
    std::string out;
    std::string report_dir;
    std::string group_by;
    std::string labels = "numeric";
    std::size_t n_bins = 10;
    bool lenient = false;
};

struct ReportArgs {
    std::string metrics;
    std::string out_dir;
};

std::vector<ConfidenceRecord> load(const std::string& path, bool lenient, const std::string& labels) {
    const auto alpha = alphabet(labels, 26);
    auto result = load_records(path, !lenient, alpha);
    for (const auto& issue : result.skipped) {
        std::cerr << "warning: skipped line " << issue.line << ": " << issue.message << '\n';
    }
    return std::move(result.records);
}

int run_synth(const SynthArgs& a) {
    const auto records = generate_synthetic(a.cfg);
    save_records(records, a.out);
    std::cerr << "wrote " << records.size() << " records to " << a.out << '\n';
    return 0;
}

int run_collect(CollectArgs a) {
    const auto questions = load_questions(a.questions);
    std::size_t max_k = 2;
    for (const auto& q : questions) {
        max_k = std::max(max_k, q.options.size());
    }
    PromptTemplate tmpl{PromptTemplate::default_text(), alphabet(a.labels, max_k)};
    if (!a.template_file.empty()) {
        tmpl.text = read_text_file(a.template_file);
    }
    const auto result = collect(questions, a.cfg, tmpl);
    save_records(result.records, a.out);
    const std::string failures_path = a.failures.empty() ? a.out + ".failures.jsonl" : a.failures;
    std::ofstream failures(failures_path, std::ios::binary | std::ios::trunc);
    std::size_t transport_failures = 0;
    for (const auto& f : result.failures) {
        failures << nlohmann::ordered_json{{"id", f.id}, {"reason", f.reason}, {"transport", f.transport}}.dump()
                 << '\n';
        transport_failures += f.transport ? 1 : 0;
    }
    std::cerr << "collected " << result.records.size() << " records, " << result.failures.size() << " failures ("
              << failures_path << ")\n";
    if (!questions.empty() && result.records.empty() && transport_failures == result.failures.size()) {
        return static_cast<int>(ExitCode::transport);
    }
    return 0;
}

nlohmann::ordered_json splits_to_json(const SplitAssignment& s) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [id, e] : s.entries) {
        j[id] = {{"split", to_string(e.split)},
                 {"fold", e.fold ? nlohmann::ordered_json(*e.fold) : nlohmann::ordered_json(nullptr)}};
    }
    return j;
}

int run_fit(FitArgs a) {
    const auto records = load(a.records, a.lenient, a.labels);
    if (a.folds > 0) {
        a.cfg.split.folds = a.folds;
    }
    a.cfg.alignment_mode = alignment_mode_from_string(a.alignment);
    a.cfg.feature_set = feature_set_from_string(a.feature_set);
    a.cfg.fit.seed = a.cfg.split.seed;
    if (!a.cfg.timestamp) {
        if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH"); epoch != nullptr && *epoch != '\0') {
            a.cfg.timestamp = std::string(epoch);
        }
    }
    const auto result = fit_pipeline(records, a.cfg);
    save_artifact(result.artifact, a.out);
    if (!a.splits_out.empty()) {
        write_text_file(a.splits_out, splits_to_json(result.splits).dump(2) + "\n");
    }
    const auto& p = result.artifact.provenance;
    std::cerr << "fit on " << p.n_calibration << " calibration / " << p.n_validation << " validation records ("
              << p.n_test << " test held out); tau=" << result.artifact.features.tau
              << " delta=" << result.artifact.delta << '\n';
    if (p.alignment_target_clipped) {
        std::cerr << "warning: alignment accuracy " << p.alignment_accuracy << " was clipped to " << p.alignment_target
                  << "; delta is large but finite\n";
    }
    return 0;
}

int run_evaluate(const EvaluateArgs& a) {
    auto records = load(a.records, a.lenient, a.labels);
    const Channel channel = channel_from_string(a.channel);
    std::optional<CalibratorArtifact> artifact;
    if (!a.artifact.empty()) {
        artifact = load_artifact(a.artifact);
    }
    if (a.split != "all") {
        if (!artifact) {
            throw UsageError("--split requires --artifact (splits are recomputed from its provenance)");
        }
        const auto& p = artifact->provenance;
        SplitConfig sc{p.calibration_fraction, p.validation_fraction, p.seed, p.folds};
        const auto splits = split_dataset(record_ids(records), sc);
        Split which = Split::test;
        if (a.split == "calibration") {
            which = Split::calibration;
        } else if (a.split == "validation") {
            which = Split::validation;
        } else if (a.split != "test") {
            throw UsageError("unknown split '" + a.split + "' (expected all, calibration, validation or test)");
        }
        records = select_split(records, splits, which);
    }
    const std::optional<std::string> group_by = a.group_by.empty() ? std::nullopt : std::optional(a.group_by);
    const auto report = evaluate(records, artifact ? &*artifact : nullptr, channel, a.n_bins, group_by);
    const auto text = to_json(report).dump(2) + "\n";
    if (a.out.empty()) {
        std::cout << text;
    } else {
        write_text_file(a.out, text);
    }
    if (!a.report_dir.empty()) {
        write_report(report, a.report_dir);
    }
    return 0;
}

int run_report(const ReportArgs& a) {
    const auto text = read_text_file(a.metrics);
    auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) {
        throw ParseError(0, "metrics", "malformed JSON in " + a.metrics);
    }
    const auto files = write_report(metric_report_from_json(j), a.out_dir);
    std::cerr << "wrote " << files.metrics_json.string() << ", " << files.bins_csv.string() << ", "
              << files.risk_coverage_csv.string() << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dual-channel confidence calibration for multiple-choice model outputs"};
    app.set_config("--config", "", "INI/TOML file of option values (sections per subcommand)");
    app.require_subcommand(1);

    SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("synth", "Generate synthetic records with controlled miscalibration");
    synth_cmd->add_option("--out", synth.out, "Output records JSONL")->required();
    synth_cmd->add_option("--n", synth.cfg.n, "Number of records");
    synth_cmd->add_option("--k", synth.cfg.k, "Options per question");
    synth_cmd->add_option("--seed", synth.cfg.seed);
    synth_cmd->add_option("--difficulty-mean", synth.cfg.difficulty_mean, "Mean of the latent correctness logit");
    synth_cmd->add_option("--difficulty-sd", synth.cfg.difficulty_sd, "Std of the latent correctness logit");
    synth_cmd->add_option("--token-shift", synth.cfg.token.shift, "Logit shift of the token channel");
    synth_cmd->add_option("--token-scale", synth.cfg.token.scale);
    synth_cmd->add_option("--token-noise", synth.cfg.token.noise);
    synth_cmd->add_option("--verbal-shift", synth.cfg.verbal.shift, "Logit shift of the verbal channel");
    synth_cmd->add_option("--verbal-scale", synth.cfg.verbal.scale);
    synth_cmd->add_option("--verbal-noise", synth.cfg.verbal.noise);
    synth_cmd->add_option("--verbal-missing-rate", synth.cfg.verbal_missing_rate);
    synth_cmd->add_option("--id-prefix", synth.cfg.id_prefix);

    CollectArgs coll;
    auto* collect_cmd = app.add_subcommand("collect", "Query a chat-completions endpoint for both channels");
    collect_cmd->add_option("--questions", coll.questions, "Questions JSONL")->required();
    collect_cmd->add_option("--out", coll.out, "Output records JSONL")->required();
    collect_cmd->add_option("--failures", coll.failures, "Failures JSONL (default: <out>.failures.jsonl)");
    collect_cmd->add_option("--endpoint", coll.cfg.endpoint, "Chat-completions URL");
    collect_cmd->add_option("--model", coll.cfg.model)->required();
    collect_cmd->add_option("--temperature", coll.cfg.temperature);
    collect_cmd->add_option("--max-parallel", coll.cfg.max_parallel);
    collect_cmd->add_option("--timeout", coll.cfg.timeout_seconds, "Per-request timeout in seconds");
    collect_cmd->add_option("--retries", coll.cfg.retries);
    collect_cmd->add_option("--top-logprobs", coll.cfg.top_logprobs);
    collect_cmd->add_option("--max-tokens", coll.cfg.max_tokens);
    collect_cmd->add_option("--api-key-env", coll.cfg.api_key_env, "Environment variable holding the bearer token");
    collect_cmd->add_option("--labels", coll.labels, "Label alphabet: numeric or letters");
    collect_cmd->add_option("--template", coll.template_file, "Prompt template file");
    collect_cmd->add_flag("--two-pass", coll.cfg.two_pass, "Separate label and confidence requests");

    FitArgs fit;
    auto* fit_cmd = app.add_subcommand("fit", "Fit the monotone fusion calibrator");
    fit_cmd->add_option("--records", fit.records)->required();
    fit_cmd->add_option("--out", fit.out, "Output artifact JSON")->required();
    fit_cmd->add_option("--cal-fraction", fit.cfg.split.calibration_fraction);
    fit_cmd->add_option("--val-fraction", fit.cfg.split.validation_fraction);
    fit_cmd->add_option("--seed", fit.cfg.split.seed);
    fit_cmd->add_option("--folds", fit.folds, "k-fold cross-fitting folds (0 = none)");
    fit_cmd->add_option("--alignment", fit.alignment, "validation or cross_fit");
    fit_cmd->add_option("--feature-set", fit.feature_set, "full or token_only");
    fit_cmd->add_option("--epsilon", fit.cfg.features.epsilon, "Log-odds clipping threshold");
    fit_cmd->add_option("--gamma", fit.cfg.features.gamma, "Consistency kernel shape");
    fit_cmd->add_option("--tau", fit.cfg.tau_grid, "Consistency bandwidth grid");
    fit_cmd->add_option("--learning-rate", fit.cfg.fit.learning_rate);
    fit_cmd->add_option("--max-iters", fit.cfg.fit.max_iters);
    fit_cmd->add_option("--weight-decay", fit.cfg.fit.weight_decay);
    fit_cmd->add_option("--patience", fit.cfg.fit.patience);
    fit_cmd->add_flag("!--no-early-stopping", fit.cfg.fit.early_stopping, "Train for max-iters without validation monitoring");
    fit_cmd->add_option("--bracket", fit.cfg.alignment.bracket, "Bisection bracket M");
    fit_cmd->add_option("--tolerance", fit.cfg.alignment.tolerance, "Bisection tolerance eta");
    fit_cmd->add_option("--alignment-epsilon", fit.cfg.alignment.epsilon, "Accuracy clipping threshold");
    fit_cmd->add_option("--timestamp", fit.cfg.timestamp, "Recorded in provenance (default: SOURCE_DATE_EPOCH)");
    fit_cmd->add_option("--splits-out", fit.splits_out, "Write the split assignment JSON");
    fit_cmd->add_option("--labels", fit.labels, "Label alphabet for parsing verbal_raw");
    fit_cmd->add_flag("--lenient", fit.lenient, "Skip malformed record lines instead of failing");

    EvaluateArgs ev;
    auto* eval_cmd = app.add_subcommand("evaluate", "Compute metrics for one confidence channel");
    eval_cmd->add_option("--records", ev.records)->required();
    eval_cmd->add_option("--artifact", ev.artifact, "Calibrator artifact (required for calibrated)");
    eval_cmd->add_option("--channel", ev.channel, "token, verbal or calibrated");
    eval_cmd->add_option("--split", ev.split, "all, calibration, validation or test");
    eval_cmd->add_option("--n-bins", ev.n_bins);
    eval_cmd->add_option("--group-by", ev.group_by, "Meta key for per-group metrics");
    eval_cmd->add_option("--out", ev.out, "metrics.json path (default: stdout)");
    eval_cmd->add_option("--report-dir", ev.report_dir, "Also write the report files here");
    eval_cmd->add_option("--labels", ev.labels, "Label alphabet for parsing verbal_raw");
    eval_cmd->add_flag("--lenient", ev.lenient, "Skip malformed record lines instead of failing");

    ReportArgs rep;
    auto* report_cmd = app.add_subcommand("report", "Write metrics.json and plot-ready CSVs");
    report_cmd->add_option("--metrics", rep.metrics, "metrics.json from evaluate")->required();
    report_cmd->add_option("--out-dir", rep.out_dir)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ExitCode::usage);
    }

    try {
        if (*synth_cmd) {
            return run_synth(synth);
        }
        if (*collect_cmd) {
            return run_collect(coll);
        }
        if (*fit_cmd) {
            return run_fit(fit);
        }
        if (*eval_cmd) {
            return run_evaluate(ev);
        }
        if (*report_cmd) {
            return run_report(rep);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::data);
    }
    return static_cast<int>(ExitCode::usage);
}
