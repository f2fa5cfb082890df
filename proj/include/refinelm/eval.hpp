#pragma once

#include <algorithm>
#include <fstream>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "refinelm/backend.hpp"
#include "refinelm/metrics.hpp"
#include "refinelm/parallel.hpp"
#include "refinelm/refine.hpp"

namespace refinelm {

struct SpecifiedQuestion {
    std::string prompt; // contains the [MASK] placeholder
    std::vector<std::string> expected;
};

struct MCQItem {
    std::string passage;
    std::string question;
    std::vector<std::pair<std::string, std::string>> options; // (label, text)
    std::string gold;
    std::string gold_word; // optional single-word answer

    void validate() const {
        if (options.size() != 4) throw DataError("mcq item needs 4 options");
        if (std::none_of(options.begin(), options.end(), [&](const auto& o) { return o.first == gold; }))
            throw DataError("mcq gold label '" + gold + "' is not an option label");
    }
};

inline SpecifiedQuestion specified_from_json(const nlohmann::json& j) {
    try {
        SpecifiedQuestion q{j.at("prompt").get<std::string>(), j.at("expected").get<std::vector<std::string>>()};
        if (q.expected.empty()) throw DataError("specified question without expected answers");
        return q;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed specified question: ") + e.what());
    }
}

inline MCQItem mcq_from_json(const nlohmann::json& j) {
    try {
        MCQItem m;
        m.passage = j.at("passage").get<std::string>();
        m.question = j.at("question").get<std::string>();
        const auto& opts = j.at("options");
        if (opts.is_object()) {
            for (const auto& [label, text] : opts.items()) m.options.emplace_back(label, text.get<std::string>());
        } else {
            for (const auto& o : opts) m.options.emplace_back(o.at(0).get<std::string>(), o.at(1).get<std::string>());
        }
        m.gold = j.at("gold").get<std::string>();
        m.gold_word = j.value("gold_word", std::string{});
        m.validate();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed mcq item: ") + e.what());
    }
}

template <class T, class F>
std::vector<T> load_jsonl(const std::string& path, F&& parse) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::vector<T> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        try {
            out.push_back(parse(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error&) {
            throw DataError(path + ":" + std::to_string(lineno) + ": unparsable line");
        } catch (const DataError& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

/// Frozen MCQ prompt:
///
///     {passage}
///     {question}
///     A. {option}
///     ...
///     Answer:
///
/// Masked-style prompts end in "Answer: {mask}." instead.
inline std::string render_mcq(const MCQItem& m, const PromptStyle& style) {
    std::string out = m.passage + "\n" + m.question + "\n";
    for (const auto& [label, text] : m.options) out += label + ". " + text + "\n";
    out += "Answer:";
    if (style.mode == PromptStyle::Mode::masked) out += " " + style.mask_token + ".";
    return out;
}

inline std::string render_specified(const SpecifiedQuestion& q, const PromptStyle& style) {
    return build_prompt(PromptVariant{0, Ordering::x1_first, Polarity::positive, q.prompt, std::string(kMaskPlaceholder)}, style);
}

/// Tokens ordered by (refined) probability; ties keep the base-model rank.
inline std::vector<std::string> ranked_tokens(const ProbeResult& r, const RefineParams* refine) {
    const auto probs = slot_probs(r, refine);
    std::vector<std::size_t> order(probs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    std::vector<std::string> out;
    out.reserve(order.size());
    for (auto i : order) out.push_back(r.dist.entries[i].token);
    return out;
}

/// Rank (0-based) of the first token matching any target, or nullopt.
inline std::optional<std::size_t> first_hit(const std::vector<std::string>& ranked, const std::vector<std::string>& targets) {
    std::vector<std::string> norm;
    for (const auto& t : targets)
        if (auto n = normalize_token(t); !n.empty()) norm.push_back(std::move(n));
    for (std::size_t i = 0; i < ranked.size(); ++i)
        if (std::find(norm.begin(), norm.end(), normalize_token(ranked[i])) != norm.end()) return i;
    return std::nullopt;
}

struct AccuracyTable {
    std::vector<std::size_t> cutoffs;
    std::vector<double> accuracy;
    std::size_t items = 0;
    bool operator==(const AccuracyTable&) const = default;
};

inline const std::vector<std::size_t> kDefaultCutoffs{1, 3, 5};

namespace detail {
inline AccuracyTable tabulate(const std::vector<std::optional<std::size_t>>& hits, std::vector<std::size_t> cutoffs) {
    std::sort(cutoffs.begin(), cutoffs.end());
    AccuracyTable t;
    t.cutoffs = cutoffs;
    t.items = hits.size();
    for (auto n : cutoffs) {
        if (n == 0) throw ConfigError("accuracy cutoff must be positive");
        std::size_t count = 0;
        for (const auto& h : hits)
            if (h && *h < n) ++count;
        t.accuracy.push_back(static_cast<double>(count) / static_cast<double>(hits.size()));
    }
    return t;
}
} // namespace detail

inline AccuracyTable eval_specified(const std::vector<SpecifiedQuestion>& questions, const Backend& backend,
                                    const RefineParams* refine, std::size_t k, const PromptStyle& style = PromptStyle::masked(),
                                    std::vector<std::size_t> cutoffs = kDefaultCutoffs, std::size_t jobs = 1) {
    if (questions.empty()) throw DataError("no specified questions");
    std::vector<std::optional<std::size_t>> hits(questions.size());
    parallel_for(questions.size(), jobs, [&](std::size_t i) {
        const auto& q = questions[i];
        if (q.expected.empty()) throw DataError("specified question without expected answers");
        const auto r = backend.probe(render_specified(q, style), q.expected, k);
        hits[i] = first_hit(ranked_tokens(r, refine), q.expected);
    });
    return detail::tabulate(hits, std::move(cutoffs));
}

inline AccuracyTable eval_mcq(const std::vector<MCQItem>& items, const Backend& backend, const RefineParams* refine,
                              std::size_t k, const PromptStyle& style = PromptStyle::masked(),
                              std::vector<std::size_t> cutoffs = kDefaultCutoffs, std::size_t jobs = 1) {
    if (items.empty()) throw DataError("no mcq items");
    std::vector<std::optional<std::size_t>> hits(items.size());
    parallel_for(items.size(), jobs, [&](std::size_t i) {
        const auto& m = items[i];
        m.validate();
        std::vector<std::string> targets{m.gold};
        if (!m.gold_word.empty()) targets.push_back(m.gold_word);
        const auto r = backend.probe(render_mcq(m, style), targets, k);
        hits[i] = first_hit(ranked_tokens(r, refine), targets);
    });
    return detail::tabulate(hits, std::move(cutoffs));
}

inline nlohmann::json to_json(const AccuracyTable& t) {
    nlohmann::json acc = nlohmann::json::object();
    for (std::size_t i = 0; i < t.cutoffs.size(); ++i) acc["acc@" + std::to_string(t.cutoffs[i])] = t.accuracy[i];
    return {{"items", t.items}, {"accuracy", acc}};
}

} // namespace refinelm
