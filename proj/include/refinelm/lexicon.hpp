#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "refinelm/core.hpp"

namespace refinelm {

struct Subject {
    std::string name;
    std::string group;
    bool operator==(const Subject&) const = default;
};

struct Attribute {
    std::string positive;
    std::string negative;
    bool operator==(const Attribute&) const = default;
};

/// Subjects (with group labels), attributes (with negations) and neutral
/// contexts for one bias category. Immutable after load.
struct Lexicon {
    Category category = Category::gender;
    std::vector<Subject> subjects;
    std::vector<Attribute> attributes;
    std::vector<std::string> contexts;

    const Subject* find_subject(std::string_view name) const {
        for (const auto& s : subjects)
            if (s.name == name) return &s;
        return nullptr;
    }

    const std::string& group_of(std::string_view name) const {
        if (const auto* s = find_subject(name)) return s->group;
        throw DataError("unknown subject '" + std::string(name) + "'");
    }

    /// Distinct groups in order of first appearance.
    std::vector<std::string> groups() const {
        std::vector<std::string> out;
        for (const auto& s : subjects)
            if (std::find(out.begin(), out.end(), s.group) == out.end()) out.push_back(s.group);
        return out;
    }

    void validate() const {
        std::set<std::string> seen;
        for (const auto& s : subjects) {
            if (s.name.empty()) throw DataError("empty subject name");
            if (s.group.empty()) throw DataError("subject '" + s.name + "' has no group");
            if (!seen.insert(s.name).second) throw DataError("duplicate subject '" + s.name + "'");
        }
        if (groups().size() < 2) throw DataError("fewer than 2 groups");
        seen.clear();
        for (const auto& a : attributes) {
            if (a.positive.empty()) throw DataError("empty attribute");
            if (a.negative.empty()) throw DataError("missing negation for attribute '" + a.positive + "'");
            if (!seen.insert(a.positive).second) throw DataError("duplicate attribute '" + a.positive + "'");
        }
        seen.clear();
        for (const auto& c : contexts) {
            if (c.empty()) throw DataError("empty context");
            if (!seen.insert(c).second) throw DataError("duplicate context '" + c + "'");
        }
    }
};

/// Parses the sectioned lexicon format:
///
///     format=1
///     [subjects]
///     John<TAB>male
///     [attributes]
///     was a senator<TAB>was never a senator
///     [contexts]
///     got off the flight to visit
///
/// Blank lines and lines starting with '#' are ignored.
inline Lexicon parse_lexicon(std::istream& in, Category category) {
    Lexicon lex;
    lex.category = category;
    enum class Section { none, subjects, attributes, contexts } section = Section::none;
    bool have_header = false;
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        if (!raw.empty() && raw.back() == '\r') raw.pop_back();
        const auto line = trim(raw);
        if (line.empty() || line.front() == '#') continue;
        const auto where = " (line " + std::to_string(lineno) + ")";
        if (!have_header) {
            if (line != "format=1") throw DataError("lexicon: expected 'format=1' header" + where);
            have_header = true;
            continue;
        }
        if (line == "[subjects]") { section = Section::subjects; continue; }
        if (line == "[attributes]") { section = Section::attributes; continue; }
        if (line == "[contexts]") { section = Section::contexts; continue; }
        if (line.front() == '[') throw DataError("lexicon: unknown section " + std::string(line) + where);

        switch (section) {
        case Section::none:
            throw DataError("lexicon: entry outside of a section" + where);
        case Section::subjects: {
            const auto cols = split_on(line, '\t');
            if (cols.size() != 2) throw DataError("lexicon: subject needs name<TAB>group" + where);
            lex.subjects.push_back({std::string(trim(cols[0])), std::string(trim(cols[1]))});
            break;
        }
        case Section::attributes: {
            const auto cols = split_on(line, '\t');
            if (cols.size() != 2 || trim(cols[1]).empty())
                throw DataError("lexicon: missing negation for attribute '" + std::string(trim(cols[0])) + "'" + where);
            lex.attributes.push_back({std::string(trim(cols[0])), std::string(trim(cols[1]))});
            break;
        }
        case Section::contexts:
            lex.contexts.emplace_back(line);
            break;
        }
    }
    if (!have_header) throw DataError("lexicon: empty file");
    lex.validate();
    return lex;
}

inline Lexicon load_lexicon(const std::string& path, Category category) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open lexicon '" + path + "'");
    return parse_lexicon(in, category);
}

inline void write_lexicon(std::ostream& out, const Lexicon& lex) {
    out << "format=1\n[subjects]\n";
    for (const auto& s : lex.subjects) out << s.name << '\t' << s.group << '\n';
    out << "[attributes]\n";
    for (const auto& a : lex.attributes) out << a.positive << '\t' << a.negative << '\n';
    out << "[contexts]\n";
    for (const auto& c : lex.contexts) out << c << '\n';
}

/// One under-specified question: an unordered cross-group subject pair, a
/// context and an attribute. x1 is the lexicographically smaller name.
struct TemplateInstance {
    Category category = Category::gender;
    Subject x1;
    Subject x2;
    std::string context;
    Attribute attribute;
    std::uint64_t id = 0;

    std::string id_hex() const { return to_hex(id); }
    bool operator==(const TemplateInstance&) const = default;
};

inline std::uint64_t template_id(Category category, std::string_view a, std::string_view b,
                                 std::string_view context, std::string_view positive) {
    if (b < a) std::swap(a, b);
    constexpr char kSep = '\x1f';
    std::string key;
    key.append(to_string(category)).push_back(kSep);
    key.append(a).push_back(kSep);
    key.append(b).push_back(kSep);
    key.append(context).push_back(kSep);
    key.append(positive);
    return fnv1a64(key);
}

inline TemplateInstance make_template(Category category, Subject a, Subject b, std::string context,
                                      Attribute attribute) {
    if (a.group == b.group)
        throw DataError("template subjects '" + a.name + "' and '" + b.name + "' share group " + a.group);
    if (b.name < a.name) std::swap(a, b);
    TemplateInstance t{category, std::move(a), std::move(b), std::move(context), std::move(attribute), 0};
    t.id = template_id(t.category, t.x1.name, t.x2.name, t.context, t.attribute.positive);
    return t;
}

inline std::size_t cross_group_pairs(const std::vector<Subject>& subjects) {
    std::map<std::string, std::size_t> per_group;
    for (const auto& s : subjects) ++per_group[s.group];
    std::size_t total = subjects.size() * subjects.size();
    for (const auto& [g, n] : per_group) total -= n * n;
    return total / 2;
}

/// Closed-form size of enumerate_templates over the given subsets.
inline std::size_t count_templates(const Lexicon& lex, const std::vector<std::string>& contexts,
                                   const std::vector<Subject>& subjects) {
    return cross_group_pairs(subjects) * contexts.size() * lex.attributes.size();
}

/// Every unordered cross-group pair x context x attribute exactly once,
/// sorted by canonical id.
inline std::vector<TemplateInstance> enumerate_templates(const Lexicon& lex,
                                                         const std::vector<std::string>& contexts,
                                                         const std::vector<Subject>& subjects) {
    if (contexts.empty()) throw ConfigError("empty context subset");
    if (subjects.empty()) throw ConfigError("empty subject subset");
    for (const auto& c : contexts)
        if (std::find(lex.contexts.begin(), lex.contexts.end(), c) == lex.contexts.end())
            throw ConfigError("context not in lexicon: '" + c + "'");
    for (const auto& s : subjects) {
        const auto* known = lex.find_subject(s.name);
        if (known == nullptr || known->group != s.group)
            throw ConfigError("subject not in lexicon: '" + s.name + "'");
    }

    std::vector<TemplateInstance> out;
    out.reserve(count_templates(lex, contexts, subjects));
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        for (std::size_t j = i + 1; j < subjects.size(); ++j) {
            if (subjects[i].group == subjects[j].group) continue;
            for (const auto& c : contexts)
                for (const auto& a : lex.attributes)
                    out.push_back(make_template(lex.category, subjects[i], subjects[j], c, a));
        }
    }
    std::sort(out.begin(), out.end(), [](const TemplateInstance& l, const TemplateInstance& r) {
        return std::tie(l.id, l.x1.name, l.x2.name, l.context, l.attribute.positive) <
               std::tie(r.id, r.x1.name, r.x2.name, r.context, r.attribute.positive);
    });
    return out;
}

inline std::vector<TemplateInstance> enumerate_templates(const Lexicon& lex) {
    return enumerate_templates(lex, lex.contexts, lex.subjects);
}

enum class Ordering { x1_first = 0, x2_first = 1 };
enum class Polarity { positive = 0, negated = 1 };

inline constexpr std::string_view kMaskPlaceholder = "[MASK]";

struct PromptVariant {
    std::uint64_t template_id = 0;
    Ordering ordering = Ordering::x1_first;
    Polarity polarity = Polarity::positive;
    std::string text;
    std::string placeholder{kMaskPlaceholder};
};

/// Row index used by score quads and zeta blocks:
/// (x1-first, a), (x2-first, a), (x1-first, not a), (x2-first, not a).
constexpr std::size_t variant_index(Ordering o, Polarity p) {
    return static_cast<std::size_t>(p) * 2 + static_cast<std::size_t>(o);
}

inline std::array<PromptVariant, 4> expand_variants(const TemplateInstance& t,
                                                    std::string_view mask_token = kMaskPlaceholder) {
    if (t.x1.name.empty() || t.x2.name.empty() || t.context.empty() || t.attribute.positive.empty() ||
        t.attribute.negative.empty() || mask_token.empty())
        throw DataError("template " + t.id_hex() + " has empty fields");
    std::array<PromptVariant, 4> out;
    for (auto p : {Polarity::positive, Polarity::negated}) {
        for (auto o : {Ordering::x1_first, Ordering::x2_first}) {
            const auto& first = o == Ordering::x1_first ? t.x1.name : t.x2.name;
            const auto& second = o == Ordering::x1_first ? t.x2.name : t.x1.name;
            const auto& attr = p == Polarity::positive ? t.attribute.positive : t.attribute.negative;
            std::string text;
            text.reserve(first.size() + t.context.size() + second.size() + attr.size() + mask_token.size() + 8);
            text.append(first).append(" ").append(t.context).append(" ").append(second).append(". ");
            text.append(mask_token).append(" ").append(attr).append(".");
            out[variant_index(o, p)] = PromptVariant{t.id, o, p, std::move(text), std::string(mask_token)};
        }
    }
    return out;
}

/// Train/test partition. Gender partitions subjects; every other category
/// partitions contexts. Explicit lists win over counts.
struct SplitConfig {
    Category category = Category::gender;
    std::vector<std::string> train_contexts;
    std::vector<std::string> test_contexts;
    std::vector<std::string> train_subjects;
    std::vector<std::string> test_subjects;
    std::optional<std::size_t> train_context_count;
    std::optional<std::size_t> test_context_count;
    std::optional<std::size_t> train_subjects_per_group;
    std::optional<std::size_t> test_subjects_per_group;
    std::uint64_t seed = 0;
};

/// Key-value split file with a `format=1` header. List keys repeat, one item per line:
///
///     format=1
///     category=religion
///     train_context_count=8
///     test_context_count=6
///     seed=13
inline SplitConfig parse_split_config(std::istream& in) {
    SplitConfig cfg;
    bool have_header = false, have_category = false;
    std::string raw;
    std::size_t lineno = 0;
    auto to_count = [&](std::string_view v) -> std::size_t {
        try {
            return static_cast<std::size_t>(std::stoull(std::string(v)));
        } catch (const std::exception&) {
            throw ConfigError("split config: bad number '" + std::string(v) + "' (line " + std::to_string(lineno) + ")");
        }
    };
    while (std::getline(in, raw)) {
        ++lineno;
        const auto line = trim(raw);
        if (line.empty() || line.front() == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos)
            throw ConfigError("split config: expected key=value (line " + std::to_string(lineno) + ")");
        const auto key = trim(line.substr(0, eq));
        const auto value = std::string(trim(line.substr(eq + 1)));
        if (!have_header) {
            if (key != "format" || value != "1") throw ConfigError("split config: expected 'format=1' header");
            have_header = true;
            continue;
        }
        if (key == "category") { cfg.category = parse_category(value); have_category = true; }
        else if (key == "seed") cfg.seed = to_count(value);
        else if (key == "train_context") cfg.train_contexts.push_back(value);
        else if (key == "test_context") cfg.test_contexts.push_back(value);
        else if (key == "train_subject") cfg.train_subjects.push_back(value);
        else if (key == "test_subject") cfg.test_subjects.push_back(value);
        else if (key == "train_context_count") cfg.train_context_count = to_count(value);
        else if (key == "test_context_count") cfg.test_context_count = to_count(value);
        else if (key == "train_subjects_per_group") cfg.train_subjects_per_group = to_count(value);
        else if (key == "test_subjects_per_group") cfg.test_subjects_per_group = to_count(value);
        else throw ConfigError("split config: unknown key '" + std::string(key) + "'");
    }
    if (!have_header) throw ConfigError("split config: empty file");
    if (!have_category) throw ConfigError("split config: missing category");
    return cfg;
}

inline SplitConfig load_split_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open split config '" + path + "'");
    return parse_split_config(in);
}

namespace detail {

inline void require_disjoint(const std::vector<std::string>& a, const std::vector<std::string>& b,
                             std::string_view what) {
    for (const auto& x : a)
        if (std::find(b.begin(), b.end(), x) != b.end())
            throw ConfigError(std::string("split: ") + std::string(what) + " '" + x + "' is in both train and test");
}

// Seeded choice of train/test context lists when only counts are given.
inline std::pair<std::vector<std::string>, std::vector<std::string>>
choose_contexts(const Lexicon& lex, const SplitConfig& cfg, bool must_partition, std::mt19937_64& rng) {
    if (!cfg.train_contexts.empty() || !cfg.test_contexts.empty()) {
        auto train = cfg.train_contexts.empty() ? lex.contexts : cfg.train_contexts;
        auto test = cfg.test_contexts.empty() ? lex.contexts : cfg.test_contexts;
        return {train, test};
    }
    if (!cfg.train_context_count && !cfg.test_context_count) {
        if (must_partition) {
            if (lex.contexts.size() < 2) throw ConfigError("split: cannot partition a single context");
            auto shuffled = lex.contexts;
            seeded_shuffle(shuffled, rng);
            const std::size_t n_train = (shuffled.size() + 1) / 2;
            return {{shuffled.begin(), shuffled.begin() + n_train}, {shuffled.begin() + n_train, shuffled.end()}};
        }
        return {lex.contexts, lex.contexts};
    }
    const std::size_t n_train = cfg.train_context_count.value_or(0);
    const std::size_t n_test = cfg.test_context_count.value_or(lex.contexts.size() - std::min(n_train, lex.contexts.size()));
    if (n_train == 0 || n_test == 0) throw ConfigError("split: context counts must be positive");
    if (n_train + n_test > lex.contexts.size())
        throw ConfigError("split: " + std::to_string(n_train) + "+" + std::to_string(n_test) +
                          " contexts requested but lexicon has " + std::to_string(lex.contexts.size()));
    auto shuffled = lex.contexts;
    seeded_shuffle(shuffled, rng);
    return {{shuffled.begin(), shuffled.begin() + n_train},
            {shuffled.begin() + n_train, shuffled.begin() + n_train + n_test}};
}

inline std::pair<std::vector<std::string>, std::vector<std::string>>
choose_subjects(const Lexicon& lex, const SplitConfig& cfg, bool must_partition, std::mt19937_64& rng) {
    std::vector<std::string> all;
    for (const auto& s : lex.subjects) all.push_back(s.name);
    if (!cfg.train_subjects.empty() || !cfg.test_subjects.empty()) {
        auto train = cfg.train_subjects.empty() ? all : cfg.train_subjects;
        auto test = cfg.test_subjects.empty() ? all : cfg.test_subjects;
        return {train, test};
    }
    if (!cfg.train_subjects_per_group && !cfg.test_subjects_per_group) {
        if (!must_partition) return {all, all};
    }
    // Per group: shuffle members, take the first n_train for train and the next n_test for test.
    std::vector<std::string> train, test;
    for (const auto& g : lex.groups()) {
        std::vector<std::string> members;
        for (const auto& s : lex.subjects)
            if (s.group == g) members.push_back(s.name);
        seeded_shuffle(members, rng);
        const std::size_t n_train = cfg.train_subjects_per_group.value_or((members.size() + 1) / 2);
        const std::size_t n_test = cfg.test_subjects_per_group.value_or(members.size() - std::min(n_train, members.size()));
        if (n_train + n_test > members.size())
            throw ConfigError("split: group '" + g + "' has " + std::to_string(members.size()) + " subjects, " +
                              std::to_string(n_train + n_test) + " requested");
        if (n_train == 0 || n_test == 0) throw ConfigError("split: group '" + g + "' cannot be partitioned");
        train.insert(train.end(), members.begin(), members.begin() + n_train);
        test.insert(test.end(), members.begin() + n_train, members.begin() + n_train + n_test);
    }
    return {train, test};
}

inline Lexicon restrict(const Lexicon& lex, const std::vector<std::string>& contexts,
                        const std::vector<std::string>& subject_names) {
    Lexicon out;
    out.category = lex.category;
    out.attributes = lex.attributes;
    // Keep lexicon order so views are independent of the list order in the config.
    for (const auto& c : lex.contexts)
        if (std::find(contexts.begin(), contexts.end(), c) != contexts.end()) out.contexts.push_back(c);
    for (const auto& s : lex.subjects)
        if (std::find(subject_names.begin(), subject_names.end(), s.name) != subject_names.end())
            out.subjects.push_back(s);
    for (const auto& c : contexts)
        if (std::find(lex.contexts.begin(), lex.contexts.end(), c) == lex.contexts.end())
            throw ConfigError("split: context not in lexicon: '" + c + "'");
    for (const auto& n : subject_names)
        if (lex.find_subject(n) == nullptr) throw ConfigError("split: subject not in lexicon: '" + n + "'");
    if (out.contexts.empty()) throw ConfigError("split: empty context partition");
    try {
        out.validate();
    } catch (const DataError& e) {
        throw ConfigError(std::string("split: partition invalid: ") + e.what());
    }
    return out;
}

} // namespace detail

struct SplitViews {
    Lexicon train;
    Lexicon test;
};

inline SplitViews split(const Lexicon& lex, const SplitConfig& cfg) {
    if (cfg.category != lex.category)
        throw ConfigError("split config category " + std::string(to_string(cfg.category)) +
                          " does not match lexicon category " + std::string(to_string(lex.category)));
    const bool by_subject = lex.category == Category::gender;
    std::mt19937_64 rng(cfg.seed);
    auto [train_ctx, test_ctx] = detail::choose_contexts(lex, cfg, !by_subject, rng);
    auto [train_sub, test_sub] = detail::choose_subjects(lex, cfg, by_subject, rng);
    // Gender contexts may be shared between the sides.
    if (by_subject)
        detail::require_disjoint(train_sub, test_sub, "subject");
    else
        detail::require_disjoint(train_ctx, test_ctx, "context");
    return {detail::restrict(lex, train_ctx, train_sub), detail::restrict(lex, test_ctx, test_sub)};
}

} // namespace refinelm
