#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "refinelm/core.hpp"
#include "refinelm/lexicon.hpp"

namespace refinelm {

using json = nlohmann::json;

struct TokenProb {
    std::string token;
    double prob = 0.0;
    bool operator==(const TokenProb&) const = default;
};

/// Top-k slice of a model's next-token distribution, most probable first.
struct TopKDistribution {
    std::vector<TokenProb> entries;

    std::size_t k() const { return entries.size(); }

    std::vector<double> probs() const {
        std::vector<double> out;
        out.reserve(entries.size());
        for (const auto& e : entries) out.push_back(e.prob);
        return out;
    }

    void validate() const {
        double total = 0.0;
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const double p = entries[i].prob;
            if (!(p >= 0.0 && p <= 1.0)) throw DataError("top-k probability out of [0,1] at rank " + std::to_string(i));
            if (i > 0 && p > entries[i - 1].prob) throw DataError("top-k probabilities not sorted at rank " + std::to_string(i));
            for (std::size_t j = 0; j < i; ++j)
                if (entries[j].token == entries[i].token) throw DataError("duplicate top-k token '" + entries[i].token + "'");
            total += p;
        }
        if (total > 1.0 + 1e-9) throw DataError("top-k mass exceeds 1");
    }

    bool operator==(const TopKDistribution&) const = default;
};

inline constexpr int kAbsent = -1;

/// Surface form used for matching: tokenizer word-boundary markers and
/// punctuation stripped, ASCII lower-cased.
inline std::string normalize_token(std::string_view tok) {
    for (std::string_view marker : {"\xC4\xA0", "\xE2\x96\x81", "##"}) {
        if (tok.substr(0, marker.size()) == marker) {
            tok.remove_prefix(marker.size());
            break;
        }
    }
    std::string out;
    for (unsigned char c : tok) {
        if (std::ispunct(c) || std::isspace(c)) continue;
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

/// First whitespace-delimited token of a subject name.
inline std::string subject_token(std::string_view name) {
    const auto t = trim(name);
    return std::string(t.substr(0, t.find_first_of(" \t")));
}

struct ProbeResult {
    std::string prompt_id;
    std::string prompt;
    TopKDistribution dist;
    std::map<std::string, int> subject_index;

    /// Index of the subject in the top-k list, or nullopt when absent.
    std::optional<std::size_t> index_of(const std::string& subject) const {
        const auto it = subject_index.find(subject);
        if (it == subject_index.end() || it->second == kAbsent) return std::nullopt;
        return static_cast<std::size_t>(it->second);
    }

    std::optional<double> score(const std::string& subject) const {
        if (const auto i = index_of(subject)) return dist.entries[*i].prob;
        return std::nullopt;
    }

    void validate() const {
        dist.validate();
        for (const auto& [name, idx] : subject_index) {
            if (idx == kAbsent) continue;
            if (idx < 0 || static_cast<std::size_t>(idx) >= dist.k())
                throw DataError("subject index out of range for '" + name + "' in " + prompt_id);
            if (normalize_token(dist.entries[idx].token) != normalize_token(subject_token(name)))
                throw DataError("token at index " + std::to_string(idx) + " does not match subject '" + name + "' in " +
                                prompt_id);
        }
    }

    bool operator==(const ProbeResult&) const = default;
};

inline json to_json(const ProbeResult& r) {
    json topk = json::array();
    for (const auto& e : r.dist.entries) topk.push_back(json::array({e.token, e.prob}));
    json subjects = json::object();
    for (const auto& [name, idx] : r.subject_index) subjects[name] = idx;
    return json{{"prompt_id", r.prompt_id}, {"prompt", r.prompt}, {"topk", std::move(topk)}, {"subjects", std::move(subjects)}};
}

inline ProbeResult probe_result_from_json(const json& j) {
    try {
        ProbeResult r;
        r.prompt_id = j.at("prompt_id").get<std::string>();
        r.prompt = j.at("prompt").get<std::string>();
        for (const auto& e : j.at("topk")) {
            if (!e.is_array() || e.size() != 2) throw DataError("top-k entry must be [token, prob]");
            r.dist.entries.push_back({e[0].get<std::string>(), e[1].get<double>()});
        }
        for (const auto& [name, idx] : j.at("subjects").items()) r.subject_index[name] = idx.get<int>();
        return r;
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed probe record: ") + e.what());
    }
}

inline constexpr std::string_view kFewShotPreamble =
    "TASK : Fill in the blank\n"
    "\n"
    "QUESTION : Hello ! How blank are you ?\n"
    "blank = are\n"
    "\n"
    "QUESTION : Time is blank .\n"
    "blank = money\n"
    "\n"
    "QUESTION : I'm really blank for being late .\n"
    "blank = sorry\n"
    "\n"
    "QUESTION : To be or not to blank, that is the question .\n"
    "blank = be\n"
    "\n";

struct PromptStyle {
    enum class Mode { masked, infill_fewshot };
    Mode mode = Mode::masked;
    std::string mask_token{kMaskPlaceholder};
    std::string fewshot_preamble;

    static PromptStyle masked(std::string mask_token = std::string(kMaskPlaceholder)) {
        return {Mode::masked, std::move(mask_token), {}};
    }
    static PromptStyle infill() { return {Mode::infill_fewshot, "blank", std::string(kFewShotPreamble)}; }

    std::string_view name() const { return mode == Mode::masked ? "masked" : "infill"; }

    /// k used by caches of this style when none is given.
    std::size_t default_k() const { return mode == Mode::masked ? 8 : 10; }

    void validate() const {
        if (mask_token.empty()) throw ConfigError("prompt style needs a mask token");
        if (mode == Mode::infill_fewshot && fewshot_preamble.empty())
            throw ConfigError("infill prompt style needs a few-shot preamble");
    }
};

inline PromptStyle parse_prompt_style(std::string_view name) {
    if (name == "masked") return PromptStyle::masked();
    if (name == "infill") return PromptStyle::infill();
    throw ConfigError("unknown prompt style '" + std::string(name) + "'");
}

inline std::string build_prompt(const PromptVariant& v, const PromptStyle& style) {
    style.validate();
    const auto pos = v.text.find(v.placeholder);
    if (v.placeholder.empty() || pos == std::string::npos)
        throw DataError("prompt variant has no mask placeholder: '" + v.text + "'");
    if (v.text.find(v.placeholder, pos + v.placeholder.size()) != std::string::npos)
        throw DataError("prompt variant has more than one mask placeholder: '" + v.text + "'");
    std::string question = v.text;
    question.replace(pos, v.placeholder.size(), style.mask_token);
    if (style.mode == PromptStyle::Mode::masked) return question;
    return style.fewshot_preamble + "QUESTION : " + question + "\n" + style.mask_token + " =";
}

/// Source of top-k distributions. Implementations must be safe to call
/// concurrently; probe() validates every result before handing it out.
class Backend {
public:
    virtual ~Backend() = default;

    ProbeResult probe(const std::string& prompt, const std::vector<std::string>& subjects, std::size_t k) const {
        if (k < 2) throw ConfigError("probe: k must be at least 2");
        if (subjects.empty()) throw ConfigError("probe: no subjects");
        auto r = do_probe(prompt, subjects, k);
        r.validate();
        return r;
    }

    virtual std::string describe() const = 0;

protected:
    virtual ProbeResult do_probe(const std::string& prompt, const std::vector<std::string>& subjects,
                                 std::size_t k) const = 0;
};

// ---------------------------------------------------------------------------
// Synthetic backend

/// Closed-form oracle. For a template whose subjects belong to groups g1, g2
/// and attribute a:
///
///     share(first)  = w(g_first, a) / (w(g_first, a) + w(g_second, a))
///     p(first)      = share                                  (positive)
///                   = (1 - noise) (1 - share) + noise share  (negated)
///     S(first)      = mass * p(first) + skew
///     S(second)     = mass * (1 - p(first)) - skew
///
/// The remaining k - 2 slots are filler tokens of probability (1 - mass) / (k - 1).
struct SyntheticSpec {
    double subject_mass = 0.5;
    double positional_skew = 0.0;
    double polarity_noise = 0.0;
    double default_affinity = 1.0;
    std::map<std::string, double> group_affinity;
    std::map<std::pair<std::string, std::string>, double> affinity; // (group, positive attribute)

    double weight(const std::string& group, const std::string& attribute) const {
        if (const auto it = affinity.find({group, attribute}); it != affinity.end()) return it->second;
        if (const auto it = group_affinity.find(group); it != group_affinity.end()) return it->second;
        return default_affinity;
    }

    static SyntheticSpec fair() { return {}; }
};

inline SyntheticSpec synthetic_spec_from_json(const json& j) {
    try {
        SyntheticSpec s;
        s.subject_mass = j.value("subject_mass", s.subject_mass);
        s.positional_skew = j.value("positional_skew", s.positional_skew);
        s.polarity_noise = j.value("polarity_noise", s.polarity_noise);
        s.default_affinity = j.value("default_affinity", s.default_affinity);
        if (j.contains("group_affinity"))
            for (const auto& [g, w] : j.at("group_affinity").items()) s.group_affinity[g] = w.get<double>();
        if (j.contains("affinity"))
            for (const auto& e : j.at("affinity"))
                s.affinity[{e.at("group").get<std::string>(), e.at("attribute").get<std::string>()}] =
                    e.at("weight").get<double>();
        return s;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("synthetic spec: ") + e.what());
    }
}

inline json to_json(const SyntheticSpec& s) {
    json aff = json::array();
    for (const auto& [key, w] : s.affinity) aff.push_back({{"group", key.first}, {"attribute", key.second}, {"weight", w}});
    return json{{"subject_mass", s.subject_mass},   {"positional_skew", s.positional_skew},
                {"polarity_noise", s.polarity_noise}, {"default_affinity", s.default_affinity},
                {"group_affinity", s.group_affinity}, {"affinity", std::move(aff)}};
}

class SyntheticBackend final : public Backend {
public:
    SyntheticBackend(Lexicon lexicon, SyntheticSpec spec, std::uint64_t seed)
        : lex_(std::move(lexicon)), spec_(std::move(spec)), seed_(seed) {
        const auto& s = spec_;
        if (!(s.subject_mass > 0.0 && s.subject_mass <= 1.0)) throw ConfigError("synthetic: subject_mass must be in (0,1]");
        if (!(s.positional_skew >= 0.0)) throw ConfigError("synthetic: positional_skew must be >= 0");
        if (!(s.polarity_noise >= 0.0 && s.polarity_noise <= 1.0)) throw ConfigError("synthetic: polarity_noise must be in [0,1]");
        for (const auto& [key, w] : s.affinity)
            if (!(w >= 0.0)) throw ConfigError("synthetic: negative affinity");
        for (const auto& [g, w] : s.group_affinity)
            if (!(w >= 0.0)) throw ConfigError("synthetic: negative affinity");
        if (!(s.default_affinity >= 0.0)) throw ConfigError("synthetic: negative affinity");
        // Every (group pair, attribute, polarity, ordering) must yield scores in [0,1].
        const auto groups = lex_.groups();
        for (const auto& a : lex_.attributes)
            for (const auto& g1 : groups)
                for (const auto& g2 : groups) {
                    if (g1 == g2) continue;
                    for (auto pol : {Polarity::positive, Polarity::negated}) {
                        const auto [first, second] = scores(g1, g2, a.positive, pol);
                        if (!(first >= 0.0 && first <= 1.0 && second >= 0.0 && second <= 1.0))
                            throw ConfigError("synthetic: spec yields probabilities outside [0,1] for groups " + g1 +
                                              "/" + g2 + ", attribute '" + a.positive + "'");
                    }
                }
    }

    /// (S(first-mentioned), S(second-mentioned)) in closed form.
    std::pair<double, double> scores(const std::string& first_group, const std::string& second_group,
                                     const std::string& attribute, Polarity polarity) const {
        const double wf = spec_.weight(first_group, attribute);
        const double ws = spec_.weight(second_group, attribute);
        const double share = (wf + ws) > 0.0 ? wf / (wf + ws) : 0.5;
        const double nu = spec_.polarity_noise;
        const double p = polarity == Polarity::positive ? share : (1.0 - nu) * (1.0 - share) + nu * share;
        return {spec_.subject_mass * p + spec_.positional_skew, spec_.subject_mass * (1.0 - p) - spec_.positional_skew};
    }

    const Lexicon& lexicon() const { return lex_; }
    const SyntheticSpec& spec() const { return spec_; }

    std::string describe() const override { return "synthetic"; }

protected:
    ProbeResult do_probe(const std::string& prompt, const std::vector<std::string>& subjects,
                         std::size_t k) const override {
        // The question is the last "QUESTION : " line for infill prompts, the whole prompt otherwise.
        std::string_view question = prompt;
        if (const auto q = question.rfind("QUESTION : "); q != std::string_view::npos) {
            question.remove_prefix(q + 11);
            question = question.substr(0, question.find('\n'));
        }
        const Attribute* attr = nullptr;
        Polarity polarity = Polarity::positive;
        std::size_t best = 0;
        for (const auto& a : lex_.attributes) {
            for (auto pol : {Polarity::positive, Polarity::negated}) {
                const std::string suffix = " " + (pol == Polarity::positive ? a.positive : a.negative) + ".";
                if (suffix.size() > best && question.size() >= suffix.size() &&
                    question.substr(question.size() - suffix.size()) == suffix) {
                    attr = &a;
                    polarity = pol;
                    best = suffix.size();
                }
            }
        }
        if (attr == nullptr) throw BackendError("synthetic backend cannot interpret prompt: '" + prompt + "'");

        const Subject* first = nullptr;
        const Subject* second = nullptr;
        for (const auto& name : subjects) {
            const auto* s = lex_.find_subject(name);
            if (s == nullptr) continue;
            if (question.size() > name.size() && question.starts_with(name) && question[name.size()] == ' ') first = s;
            else if (question.find(" " + name + ".") != std::string_view::npos) second = s;
        }
        if (first == nullptr || second == nullptr)
            throw BackendError("synthetic backend cannot locate both subjects in: '" + prompt + "'");

        const auto [s_first, s_second] = scores(first->group, second->group, attr->positive, polarity);
        std::vector<TokenProb> entries{{subject_token(first->name), s_first}, {subject_token(second->name), s_second}};
        if (entries[0].token == entries[1].token)
            throw BackendError("synthetic backend: subjects share the token '" + entries[0].token + "'");
        const double filler = (1.0 - spec_.subject_mass) / static_cast<double>(k - 1);
        for (std::size_t i = 0; i + 2 < k; ++i)
            entries.push_back({"w" + to_hex(fnv1a64(std::to_string(i), seed_ ^ 0x9e3779b97f4a7c15ULL)).substr(0, 8), filler});
        std::stable_sort(entries.begin(), entries.end(), [](const TokenProb& a, const TokenProb& b) {
            return a.prob != b.prob ? a.prob > b.prob : a.token < b.token;
        });

        ProbeResult r;
        r.prompt_id = prompt_id(prompt);
        r.prompt = prompt;
        r.dist.entries = std::move(entries);
        for (const auto& name : subjects) {
            int idx = kAbsent;
            if (name == first->name || name == second->name) {
                const auto tok = subject_token(name);
                for (std::size_t i = 0; i < r.dist.entries.size(); ++i)
                    if (r.dist.entries[i].token == tok) idx = static_cast<int>(i);
            }
            r.subject_index[name] = idx;
        }
        return r;
    }

private:
    Lexicon lex_;
    SyntheticSpec spec_;
    std::uint64_t seed_;
};

inline std::unique_ptr<SyntheticBackend> new_synthetic(Lexicon lexicon, SyntheticSpec spec, std::uint64_t seed) {
    return std::make_unique<SyntheticBackend>(std::move(lexicon), std::move(spec), seed);
}

// ---------------------------------------------------------------------------
// File cache

struct CacheHeader {
    int format = 1;
    std::size_t k = 8;
    std::string style = "masked";
    bool operator==(const CacheHeader&) const = default;
};

inline constexpr int kCacheFormat = 1;

inline void write_cache(std::ostream& out, const CacheHeader& header, const std::vector<ProbeResult>& records) {
    out << json{{"format", header.format}, {"k", header.k}, {"style", header.style}}.dump() << '\n';
    for (const auto& r : records) {
        if (r.dist.k() != header.k)
            throw DataError("cache record " + r.prompt_id + " has " + std::to_string(r.dist.k()) + " entries, header k=" +
                            std::to_string(header.k));
        out << to_json(r).dump() << '\n';
    }
}

inline void write_cache(const std::string& path, const CacheHeader& header, const std::vector<ProbeResult>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write cache '" + path + "'");
    write_cache(out, header, records);
    if (!out) throw DataError("write failed for cache '" + path + "'");
}

/// Replays a JSON Lines probe cache. Immutable after open.
class FileBackend final : public Backend {
public:
    explicit FileBackend(std::istream& in, std::string origin = "<stream>") : origin_(std::move(origin)) {
        std::string line;
        if (!std::getline(in, line)) throw DataError("cache '" + origin_ + "': missing header");
        try {
            const auto h = json::parse(line);
            header_.format = h.at("format").get<int>();
            if (header_.format != kCacheFormat)
                throw DataError("cache '" + origin_ + "': format version " + std::to_string(header_.format) +
                                " unsupported (expected " + std::to_string(kCacheFormat) + ")");
            header_.k = h.at("k").get<std::size_t>();
            header_.style = h.at("style").get<std::string>();
        } catch (const json::exception& e) {
            throw DataError("cache '" + origin_ + "': bad header: " + e.what());
        }
        std::size_t lineno = 1;
        while (std::getline(in, line)) {
            ++lineno;
            if (trim(line).empty()) continue;
            json j;
            try {
                j = json::parse(line);
            } catch (const json::exception&) {
                throw DataError("cache '" + origin_ + "': truncated or unparsable record at line " + std::to_string(lineno));
            }
            auto r = probe_result_from_json(j);
            if (r.dist.k() != header_.k)
                throw DataError("cache '" + origin_ + "': record at line " + std::to_string(lineno) + " has " +
                                std::to_string(r.dist.k()) + " entries, header k=" + std::to_string(header_.k));
            auto id = r.prompt_id;
            records_.emplace(std::move(id), std::move(r));
        }
    }

    const CacheHeader& header() const { return header_; }
    std::size_t size() const { return records_.size(); }
    bool contains(const std::string& prompt) const { return records_.count(prompt_id(prompt)) != 0; }

    std::string describe() const override { return "cache:" + origin_; }

protected:
    ProbeResult do_probe(const std::string& prompt, const std::vector<std::string>& subjects,
                         std::size_t k) const override {
        const auto id = prompt_id(prompt);
        const auto it = records_.find(id);
        if (it == records_.end()) throw CacheMiss(id);
        if (it->second.prompt != prompt) throw BackendError("cache '" + origin_ + "': prompt_id collision for " + id);
        if (k > header_.k)
            throw ConfigError("requested k=" + std::to_string(k) + " exceeds cache k=" + std::to_string(header_.k));
        ProbeResult r = it->second;
        if (k < header_.k) r.dist.entries.resize(k);
        // Requested names the exporter did not resolve are absent.
        for (const auto& name : subjects) r.subject_index.try_emplace(name, kAbsent);
        if (k < header_.k)
            for (auto& [name, idx] : r.subject_index)
                if (idx >= static_cast<int>(k)) idx = kAbsent;
        return r;
    }

private:
    std::string origin_;
    CacheHeader header_;
    std::unordered_map<std::string, ProbeResult> records_;
};

inline std::unique_ptr<FileBackend> open_cache(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open cache '" + path + "'");
    return std::make_unique<FileBackend>(in, path);
}

} // namespace refinelm
