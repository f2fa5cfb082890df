#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "refinelm/backend.hpp"
#include "refinelm/lexicon.hpp"
#include "refinelm/parallel.hpp"
#include "refinelm/refine.hpp"

namespace refinelm {

/// Probability per top-k slot, after the refine layer when one is given.
/// The refined distribution is rescaled to the original top-k mass so the
/// layer only redistributes probability among the k tokens.
inline std::vector<double> slot_probs(const ProbeResult& r, const RefineParams* refine) {
    auto probs = r.dist.probs();
    if (refine == nullptr) return probs;
    if (refine->k != probs.size())
        throw ConfigError("refine layer has k=" + std::to_string(refine->k) + " but probe has " + std::to_string(probs.size()) +
                          " entries");
    double mass = 0.0;
    for (double p : probs) mass += p;
    auto out = forward(*refine, probs);
    for (double& x : out) x *= mass;
    return out;
}

enum class Which { x1 = 0, x2 = 1 };

/// The eight subject scores of one template: (ordering, polarity, subject).
struct ScoreQuad {
    TemplateInstance tmpl;
    std::array<std::optional<double>, 8> slots{};

    static constexpr std::size_t slot(Ordering o, Polarity p, Which w) {
        return variant_index(o, p) * 2 + static_cast<std::size_t>(w);
    }

    const std::optional<double>& at(Ordering o, Polarity p, Which w) const { return slots[slot(o, p, w)]; }
    std::optional<double>& at(Ordering o, Polarity p, Which w) { return slots[slot(o, p, w)]; }

    bool complete() const {
        return std::all_of(slots.begin(), slots.end(), [](const auto& s) { return s.has_value(); });
    }

    /// Same quad with the roles of x1 and x2 exchanged.
    ScoreQuad relabeled() const {
        ScoreQuad q;
        q.tmpl = tmpl;
        std::swap(q.tmpl.x1, q.tmpl.x2);
        auto flip = [](Ordering o) { return o == Ordering::x1_first ? Ordering::x2_first : Ordering::x1_first; };
        for (auto o : {Ordering::x1_first, Ordering::x2_first})
            for (auto p : {Polarity::positive, Polarity::negated}) {
                q.at(flip(o), p, Which::x1) = at(o, p, Which::x2);
                q.at(flip(o), p, Which::x2) = at(o, p, Which::x1);
            }
        return q;
    }
};

using TemplateProbes = std::array<ProbeResult, 4>;

inline TemplateProbes probe_template(const TemplateInstance& t, const Backend& backend, std::size_t k,
                                     const PromptStyle& style) {
    const auto variants = expand_variants(t);
    const std::vector<std::string> subjects{t.x1.name, t.x2.name};
    TemplateProbes out;
    for (std::size_t v = 0; v < 4; ++v) out[v] = backend.probe(build_prompt(variants[v], style), subjects, k);
    return out;
}

inline ScoreQuad quad_from_probes(const TemplateInstance& t, const TemplateProbes& probes, const RefineParams* refine) {
    ScoreQuad q;
    q.tmpl = t;
    for (auto p : {Polarity::positive, Polarity::negated})
        for (auto o : {Ordering::x1_first, Ordering::x2_first}) {
            const auto& r = probes[variant_index(o, p)];
            const auto i1 = r.index_of(t.x1.name);
            const auto i2 = r.index_of(t.x2.name);
            if (!i1 && !i2) continue;
            const auto probs = slot_probs(r, refine);
            if (i1) q.at(o, p, Which::x1) = probs[*i1];
            if (i2) q.at(o, p, Which::x2) = probs[*i2];
        }
    return q;
}

inline ScoreQuad score_quad(const TemplateInstance& t, const Backend& backend, const RefineParams* refine, std::size_t k,
                            const PromptStyle& style = PromptStyle::masked()) {
    return quad_from_probes(t, probe_template(t, backend, k, style), refine);
}

namespace detail {
inline double present(const ScoreQuad& q, Ordering o, Polarity p, Which w) {
    const auto& s = q.at(o, p, w);
    if (!s) throw DataError("template " + q.tmpl.id_hex() + ": absent subject score");
    return *s;
}
} // namespace detail

/// |S(x1 | x1 first, a) - S(x1 | x2 first, a)|
inline double positional_error(const ScoreQuad& q) {
    using enum Ordering;
    return std::abs(detail::present(q, x1_first, Polarity::positive, Which::x1) -
                    detail::present(q, x2_first, Polarity::positive, Which::x1));
}

/// Positional error with x2 as the reference subject.
inline double positional_error_x2(const ScoreQuad& q) {
    using enum Ordering;
    return std::abs(detail::present(q, x2_first, Polarity::positive, Which::x2) -
                    detail::present(q, x1_first, Polarity::positive, Which::x2));
}

/// |S(x1 | x1 first, a) - S(x2 | x1 first, not a)|
inline double attributive_error(const ScoreQuad& q) {
    return std::abs(detail::present(q, Ordering::x1_first, Polarity::positive, Which::x1) -
                    detail::present(q, Ordering::x1_first, Polarity::negated, Which::x2));
}

struct TemplateBias {
    std::uint64_t template_id = 0;
    std::string x1_group;
    std::string x2_group;
    std::string attribute;
    double delta = 0.0;    // x1 reference
    double delta_x2 = 0.0; // x2 reference
    double epsilon = 0.0;
    double b_x1 = 0.0;
    double b_x2 = 0.0;
    double c = 0.0;
    bool operator==(const TemplateBias&) const = default;
};

/// Order-averaged subject score on a minus the same on its negation.
inline double subject_attribute_bias(const ScoreQuad& q, Which w) {
    using enum Ordering;
    const double pos = 0.5 * (detail::present(q, x1_first, Polarity::positive, w) + detail::present(q, x2_first, Polarity::positive, w));
    const double neg = 0.5 * (detail::present(q, x1_first, Polarity::negated, w) + detail::present(q, x2_first, Polarity::negated, w));
    return pos - neg;
}

inline TemplateBias comparative_bias(const ScoreQuad& q) {
    if (!q.complete()) throw DataError("template " + q.tmpl.id_hex() + ": incomplete score quad");
    TemplateBias b;
    b.template_id = q.tmpl.id;
    b.x1_group = q.tmpl.x1.group;
    b.x2_group = q.tmpl.x2.group;
    b.attribute = q.tmpl.attribute.positive;
    b.delta = positional_error(q);
    b.delta_x2 = positional_error_x2(q);
    b.epsilon = attributive_error(q);
    b.b_x1 = subject_attribute_bias(q, Which::x1);
    b.b_x2 = subject_attribute_bias(q, Which::x2);
    b.c = 0.5 * (b.b_x1 - b.b_x2);
    return b;
}

// ---------------------------------------------------------------------------
// Aggregation

struct PairGamma {
    std::string group_a; // group_a < group_b; positive gamma favours group_a
    std::string group_b;
    std::string attribute;
    double gamma = 0.0;
    std::size_t count = 0;
    bool operator==(const PairGamma&) const = default;
};

struct GroupGamma {
    std::string group;
    std::string attribute; // empty for the all-attribute summary
    double gamma = 0.0;
    std::size_t count = 0;
    bool operator==(const GroupGamma&) const = default;
};

inline constexpr int kReportSchema = 1;

struct BiasReport {
    int schema = kReportSchema;
    std::string category;
    std::map<std::string, std::string> provenance;
    std::vector<TemplateBias> templates;
    std::vector<PairGamma> gamma;
    std::vector<GroupGamma> group_gamma;           // per group, all attributes
    std::vector<GroupGamma> group_attribute_gamma; // per (group, attribute)
    double mu = 0.0;
    double avg_positional = 0.0; // mean of the x1- and x2-referenced averages
    double avg_positional_x1 = 0.0;
    double avg_positional_x2 = 0.0;
    double avg_attributive = 0.0;
    std::size_t skipped = 0;
    bool operator==(const BiasReport&) const = default;
};

/// Signed gamma per (group pair, attribute), mu as the attribute-average of
/// the largest |gamma| over group pairs, unsigned mean errors, and per-group
/// gamma where each group is confronted with every other group.
inline BiasReport aggregate(const std::vector<TemplateBias>& biases, const std::vector<std::string>& groups,
                            std::size_t skipped = 0) {
    if (biases.empty()) throw DataError("aggregate: no templates with complete scores");
    BiasReport rep;
    rep.templates = biases;
    rep.skipped = skipped;

    std::vector<double> d1, d2, eps;
    d1.reserve(biases.size());
    d2.reserve(biases.size());
    eps.reserve(biases.size());
    std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> by_pair;
    std::map<std::pair<std::string, std::string>, std::vector<double>> by_group_attr;
    std::map<std::string, std::vector<double>> by_group;
    for (const auto& b : biases) {
        d1.push_back(b.delta);
        d2.push_back(b.delta_x2);
        eps.push_back(b.epsilon);
        const bool x1_is_a = b.x1_group < b.x2_group;
        const auto& ga = x1_is_a ? b.x1_group : b.x2_group;
        const auto& gb = x1_is_a ? b.x2_group : b.x1_group;
        by_pair[{ga, gb, b.attribute}].push_back(x1_is_a ? b.c : -b.c);
        by_group_attr[{b.x1_group, b.attribute}].push_back(b.c);
        by_group_attr[{b.x2_group, b.attribute}].push_back(-b.c);
        by_group[b.x1_group].push_back(b.c);
        by_group[b.x2_group].push_back(-b.c);
    }
    rep.avg_positional_x1 = pairwise_mean(d1);
    rep.avg_positional_x2 = pairwise_mean(d2);
    rep.avg_positional = 0.5 * (rep.avg_positional_x1 + rep.avg_positional_x2);
    rep.avg_attributive = pairwise_mean(eps);

    std::map<std::string, double> max_abs_by_attr;
    for (const auto& [key, cs] : by_pair) {
        const auto& [ga, gb, attr] = key;
        const double g = pairwise_mean(cs);
        rep.gamma.push_back({ga, gb, attr, g, cs.size()});
        auto& m = max_abs_by_attr[attr];
        m = std::max(m, std::abs(g));
    }
    std::vector<double> maxima;
    for (const auto& [attr, m] : max_abs_by_attr) maxima.push_back(m);
    rep.mu = pairwise_mean(maxima);

    for (const auto& g : groups) {
        const auto it = by_group.find(g);
        if (it == by_group.end()) rep.group_gamma.push_back({g, "", 0.0, 0});
        else rep.group_gamma.push_back({g, "", pairwise_mean(it->second), it->second.size()});
    }
    for (const auto& [key, cs] : by_group)
        if (std::find(groups.begin(), groups.end(), key) == groups.end())
            throw DataError("aggregate: template group '" + key + "' not in the group list");
    for (const auto& [key, cs] : by_group_attr) rep.group_attribute_gamma.push_back({key.first, key.second, pairwise_mean(cs), cs.size()});
    return rep;
}

/// Prompt ids a backend could not serve, gathered across all templates.
class MissingProbes : public BackendError {
public:
    explicit MissingProbes(std::vector<std::string> ids)
        : BackendError(std::to_string(ids.size()) + " prompt(s) missing from backend"), ids_(std::move(ids)) {}
    const std::vector<std::string>& ids() const { return ids_; }

private:
    std::vector<std::string> ids_;
};

struct ScoredTemplates {
    std::vector<TemplateBias> biases; // template order, complete quads only
    std::size_t skipped = 0;
};

/// Scores every template; quads with an absent slot are counted, not scored.
/// Cache misses are collected across all templates before failing.
inline ScoredTemplates score_templates(const std::vector<TemplateInstance>& templates, const Backend& backend,
                                       const RefineParams* refine, std::size_t k, const PromptStyle& style,
                                       std::size_t jobs = 1) {
    std::vector<std::optional<TemplateBias>> slots(templates.size());
    std::vector<std::string> missing;
    std::mutex mu;
    parallel_for(templates.size(), jobs, [&](std::size_t i) {
        const auto variants = expand_variants(templates[i]);
        const std::vector<std::string> subjects{templates[i].x1.name, templates[i].x2.name};
        TemplateProbes probes;
        bool ok = true;
        for (std::size_t v = 0; v < 4; ++v) {
            try {
                probes[v] = backend.probe(build_prompt(variants[v], style), subjects, k);
            } catch (const CacheMiss& e) {
                std::lock_guard lock(mu);
                missing.push_back(e.prompt_id());
                ok = false;
            }
        }
        if (!ok) return;
        const auto q = quad_from_probes(templates[i], probes, refine);
        if (q.complete()) slots[i] = comparative_bias(q);
    });
    if (!missing.empty()) {
        std::sort(missing.begin(), missing.end());
        missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
        throw MissingProbes(std::move(missing));
    }
    ScoredTemplates out;
    for (auto& s : slots) {
        if (s) out.biases.push_back(std::move(*s));
        else ++out.skipped;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const BiasReport& r) {
    using nlohmann::json;
    json templates = json::array();
    for (const auto& t : r.templates)
        templates.push_back({{"template_id", to_hex(t.template_id)}, {"x1_group", t.x1_group}, {"x2_group", t.x2_group},
                             {"attribute", t.attribute}, {"delta", t.delta}, {"delta_x2", t.delta_x2},
                             {"epsilon", t.epsilon}, {"b_x1", t.b_x1}, {"b_x2", t.b_x2}, {"c", t.c}});
    json gamma = json::array();
    for (const auto& g : r.gamma)
        gamma.push_back({{"group_a", g.group_a}, {"group_b", g.group_b}, {"attribute", g.attribute}, {"gamma", g.gamma}, {"count", g.count}});
    auto groups = [](const std::vector<GroupGamma>& gs) {
        json out = json::array();
        for (const auto& g : gs) out.push_back({{"group", g.group}, {"attribute", g.attribute}, {"gamma", g.gamma}, {"count", g.count}});
        return out;
    };
    return {{"schema", r.schema},
            {"category", r.category},
            {"provenance", r.provenance},
            {"mu", r.mu},
            {"avg_positional", r.avg_positional},
            {"avg_positional_x1", r.avg_positional_x1},
            {"avg_positional_x2", r.avg_positional_x2},
            {"avg_attributive", r.avg_attributive},
            {"skipped", r.skipped},
            {"gamma", std::move(gamma)},
            {"group_gamma", groups(r.group_gamma)},
            {"group_attribute_gamma", groups(r.group_attribute_gamma)},
            {"templates", std::move(templates)}};
}

inline BiasReport bias_report_from_json(const nlohmann::json& j) {
    try {
        BiasReport r;
        r.schema = j.at("schema").get<int>();
        if (r.schema != kReportSchema)
            throw DataError("report schema " + std::to_string(r.schema) + " unsupported (expected " + std::to_string(kReportSchema) + ")");
        r.category = j.at("category").get<std::string>();
        r.provenance = j.at("provenance").get<std::map<std::string, std::string>>();
        r.mu = j.at("mu").get<double>();
        r.avg_positional = j.at("avg_positional").get<double>();
        r.avg_positional_x1 = j.at("avg_positional_x1").get<double>();
        r.avg_positional_x2 = j.at("avg_positional_x2").get<double>();
        r.avg_attributive = j.at("avg_attributive").get<double>();
        r.skipped = j.at("skipped").get<std::size_t>();
        for (const auto& g : j.at("gamma"))
            r.gamma.push_back({g.at("group_a"), g.at("group_b"), g.at("attribute"), g.at("gamma"), g.at("count")});
        for (const auto& g : j.at("group_gamma"))
            r.group_gamma.push_back({g.at("group"), g.at("attribute"), g.at("gamma"), g.at("count")});
        for (const auto& g : j.at("group_attribute_gamma"))
            r.group_attribute_gamma.push_back({g.at("group"), g.at("attribute"), g.at("gamma"), g.at("count")});
        for (const auto& t : j.at("templates")) {
            TemplateBias b;
            b.template_id = std::stoull(t.at("template_id").get<std::string>(), nullptr, 16);
            b.x1_group = t.at("x1_group");
            b.x2_group = t.at("x2_group");
            b.attribute = t.at("attribute");
            b.delta = t.at("delta");
            b.delta_x2 = t.at("delta_x2");
            b.epsilon = t.at("epsilon");
            b.b_x1 = t.at("b_x1");
            b.b_x2 = t.at("b_x2");
            b.c = t.at("c");
            r.templates.push_back(std::move(b));
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed bias report: ") + e.what());
    }
}

inline std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

/// Flat CSV: one `group` row per (group, attribute) gamma, then one `summary` row.
inline void write_report_csv(std::ostream& out, const BiasReport& r) {
    out << "# schema=" << r.schema << "\n";
    out << "kind,group,attribute,gamma,count,mu,avg_positional,avg_attributive,skipped\n";
    auto num = [](double v) { return nlohmann::json(v).dump(); };
    for (const auto& g : r.group_attribute_gamma)
        out << "group," << csv_field(g.group) << ',' << csv_field(g.attribute) << ',' << num(g.gamma) << ',' << g.count << ",,,,\n";
    out << "summary,,,,," << num(r.mu) << ',' << num(r.avg_positional) << ',' << num(r.avg_attributive) << ',' << r.skipped << "\n";
}

inline void save_report(const std::string& json_path, const std::string& csv_path, const BiasReport& r) {
    {
        std::ofstream out(json_path, std::ios::binary);
        if (!out) throw DataError("cannot write report '" + json_path + "'");
        out << to_json(r).dump(1) << '\n';
    }
    std::ofstream out(csv_path, std::ios::binary);
    if (!out) throw DataError("cannot write report '" + csv_path + "'");
    write_report_csv(out, r);
}

inline BiasReport load_report(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open report '" + path + "'");
    try {
        return bias_report_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("report '" + path + "': " + e.what());
    }
}

} // namespace refinelm
