#include <dualconf/features.hpp>
#include <dualconf/parsing.hpp>

#include <gtest/gtest.h>

#include "corpus.hpp"

#include <cmath>
#include <random>

using namespace dualconf;

namespace {

std::size_t count_occurrences(const std::string& hay, const std::string& needle) {
    std::size_t n = 0;
    for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) {
        ++n;
    }
    return n;
}

} // namespace

TEST(RenderPrompt, TwoOptionsDefaultTemplate) {
    const std::vector<std::string> options{"a red square", "a blue circle"};
    const auto tmpl = PromptTemplate::numeric_default();
    const auto prompt = render_prompt("Which shape is shown?", options, tmpl);
    EXPECT_EQ(count_occurrences(prompt, "a red square"), 1u);
    EXPECT_EQ(count_occurrences(prompt, "a blue circle"), 1u);
    EXPECT_NE(prompt.find("1. a red square\n2. a blue circle"), std::string::npos);
    EXPECT_NE(prompt.find("keys {1, 2}"), std::string::npos);
    EXPECT_NE(prompt.find("with 2 options"), std::string::npos);
    EXPECT_NE(prompt.find("Question: Which shape is shown?"), std::string::npos);
    EXPECT_EQ(prompt, render_prompt("Which shape is shown?", options, tmpl));
}

TEST(RenderPrompt, OptionBracesAreVerbatim) {
    const std::vector<std::string> options{"set {question}", "map {k} -> {"};
    const auto prompt = render_prompt("What is {options}?", options, PromptTemplate::numeric_default());
    EXPECT_NE(prompt.find("1. set {question}"), std::string::npos);
    EXPECT_NE(prompt.find("2. map {k} -> {"), std::string::npos);
    EXPECT_NE(prompt.find("Question: What is {options}?"), std::string::npos);
}

TEST(RenderPrompt, LetterAlphabetNamesLabels) {
    const std::vector<std::string> options{"w", "x", "y", "z"};
    const auto prompt = render_prompt("q", options, PromptTemplate::letter_default());
    EXPECT_NE(prompt.find("exactly one option label (A, B, C, D)"), std::string::npos);
    EXPECT_NE(prompt.find("A. w\nB. x\nC. y\nD. z"), std::string::npos);
    EXPECT_NE(prompt.find("keys {1, 2, 3, 4}"), std::string::npos);
}

TEST(RenderPrompt, Errors) {
    const std::vector<std::string> options{"a", "b"};
    for (const char* text : {"{options} {k}", "{question} {k}", "{question} {options}"}) {
        PromptTemplate t{text, PromptTemplate::numeric_labels(4)};
        EXPECT_THROW(render_prompt("q", options, t), ConfigError) << text;
    }
    PromptTemplate short_alphabet{PromptTemplate::default_text(), {"A"}};
    EXPECT_THROW(render_prompt("q", options, short_alphabet), ConfigError);
    const std::vector<std::string> one{"a"};
    EXPECT_THROW(render_prompt("q", one, PromptTemplate::numeric_default()), UsageError);
}

TEST(ParseVerbal, SpecifiedExamples) {
    auto p = parse_verbal_response(R"({"1": 80, "2": 10, "3": 5, "4": 5})", 4);
    EXPECT_EQ(p.values, (std::vector<double>{0.80, 0.10, 0.05, 0.05}));
    EXPECT_EQ(p.missing_mask, (std::vector<bool>(4, false)));
    EXPECT_EQ(p.source, VerbalSource::json);

    p = parse_verbal_response(R"({"1": 80, "2": 10, "4": 5})", 4);
    EXPECT_EQ(p.values[2], 0.5);
    EXPECT_EQ(p.missing_mask, (std::vector<bool>{false, false, true, false}));

    p = parse_verbal_response(R"({"1": 150, "2": -3})", 2);
    EXPECT_EQ(p.values, (std::vector<double>{1.0, 0.0}));

    p = parse_verbal_response("Option 1: 70, option 2: 30 maybe", 2);
    EXPECT_EQ(p.values, (std::vector<double>{0.7, 0.3}));
    EXPECT_EQ(p.source, VerbalSource::regex_fallback);
}

TEST(ParseVerbal, NeverRenormalizes) {
    const auto p = parse_verbal_response(R"({"1":90,"2":90})", 2);
    EXPECT_EQ(p.values, (std::vector<double>{0.9, 0.9}));
}

TEST(ParseVerbal, RegexWindowIsBounded) {
    // Thirteen non-digit characters between identifier and number is too far.
    auto p = parse_verbal_response("1 ----------> 70", 2);
    EXPECT_EQ(p.source, VerbalSource::all_imputed);
    p = parse_verbal_response("1 ---------> 70", 2);
    EXPECT_EQ(p.source, VerbalSource::regex_fallback);
    EXPECT_EQ(p.values[0], 0.7);
}

TEST(ParseVerbal, KTooSmallIsUsageError) {
    EXPECT_THROW(parse_verbal_response("{}", 1), UsageError);
    EXPECT_THROW(parse_verbal_response("{}", 0), UsageError);
}

TEST(DefaultVerbal, AllImputed) {
    const auto d = default_verbal(3);
    EXPECT_EQ(d.values, (std::vector<double>{0.5, 0.5, 0.5}));
    EXPECT_EQ(d.source, VerbalSource::all_imputed);
    EXPECT_EQ(default_verbal(2).missing_mask, (std::vector<bool>{true, true}));
    EXPECT_THROW(default_verbal(1), UsageError);
}

TEST(DefaultVerbal, ComposesWithConsistency) {
    const auto d = default_verbal(2);
    for (double tau : {0.05, 0.25, 1.0}) {
        for (double p = 0.0; p <= 1.0; p += 0.0625) {
            EXPECT_DOUBLE_EQ(consistency(p, d.values[0], 2.0, tau), std::exp(-(p - 0.5) * (p - 0.5) / tau));
        }
    }
}

TEST(ParseVerbal, FixtureCorpus) {
    const auto corpus = load_verbal_corpus(std::string(DUALCONF_FIXTURES) + "/verbal_corpus.jsonl");
    ASSERT_EQ(corpus.size(), 50u);
    for (const auto& c : corpus) {
        EXPECT_EQ(check_corpus_case(c), "");
    }
}

TEST(ParseVerbal, CanonicalReserializationIsIdempotent) {
    std::mt19937_64 rng(21);
    std::uniform_int_distribution<int> kdist(2, 9);
    std::uniform_real_distribution<double> pct(-20.0, 170.0);
    std::bernoulli_distribution drop(0.2);
    for (int trial = 0; trial < 5000; ++trial) {
        const std::size_t k = kdist(rng);
        nlohmann::json obj = nlohmann::json::object();
        for (std::size_t i = 1; i <= k; ++i) {
            if (!drop(rng)) {
                obj[std::to_string(i)] = pct(rng);
            }
        }
        const auto first = parse_verbal_response(obj.dump(), k);
        const auto second = parse_verbal_response(to_canonical_response(first), k);
        ASSERT_EQ(first.values, second.values) << obj.dump();
        ASSERT_EQ(first.missing_mask, second.missing_mask);
    }
}

TEST(ParseVerbal, RandomBytesNeverEscape) {
    std::mt19937_64 rng(4242);
    std::uniform_int_distribution<int> len(0, 200);
    std::uniform_int_distribution<int> byte(0, 255);
    std::uniform_int_distribution<int> kdist(2, 8);
    const std::string alphabet = "{}\":,0123456789.%-eABCD \n";
    std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
    for (int trial = 0; trial < 4000; ++trial) {
        std::string text(len(rng), '\0');
        const bool structured = trial % 2 == 1;
        for (char& c : text) {
            c = structured ? alphabet[pick(rng)] : static_cast<char>(byte(rng));
        }
        const std::size_t k = kdist(rng);
        ParsedVerbal p;
        ASSERT_NO_THROW(p = parse_verbal_response(text, k, PromptTemplate::letter_labels(k)));
        ASSERT_EQ(p.values.size(), k);
        ASSERT_EQ(p.missing_mask.size(), k);
        for (std::size_t i = 0; i < k; ++i) {
            ASSERT_GE(p.values[i], 0.0);
            ASSERT_LE(p.values[i], 1.0);
            if (p.missing_mask[i]) {
                ASSERT_EQ(p.values[i], 0.5);
            }
        }
    }
}
