#pragma once

#include <random>
#include <string>
#include <vector>

#include "refinelm/backend.hpp"
#include "refinelm/lexicon.hpp"
#include "refinelm/metrics.hpp"
#include "refinelm/trainer.hpp"

namespace fixtures {

using namespace refinelm;

/// Lexicon with `per_group[g]` subjects in group g, single-token names.
inline Lexicon make_lexicon(Category cat, const std::vector<std::size_t>& per_group, std::size_t attributes,
                            std::size_t contexts) {
    Lexicon lex;
    lex.category = cat;
    for (std::size_t g = 0; g < per_group.size(); ++g)
        for (std::size_t i = 0; i < per_group[g]; ++i)
            lex.subjects.push_back({"S" + std::to_string(g) + "x" + std::to_string(i), "g" + std::to_string(g)});
    for (std::size_t a = 0; a < attributes; ++a)
        lex.attributes.push_back({"was trait" + std::to_string(a), "was never trait" + std::to_string(a)});
    for (std::size_t c = 0; c < contexts; ++c) lex.contexts.push_back("met place" + std::to_string(c) + " with");
    return lex;
}

/// Uniform [0, 1) from a 64-bit hash, independent of the standard library.
inline double hash_unit(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

/// Four single-subject groups, ten attributes, six contexts (four for
/// training, two held out), and per-(group, attribute) affinities spread over
/// [0.1, 1.0]. Initial held-out bias intensity is about 0.21.
struct DebiasScenario {
    Lexicon lex;
    SyntheticSpec spec;
    std::vector<std::string> train_contexts;
    std::vector<std::string> heldout_contexts;
};

inline DebiasScenario debias_scenario() {
    DebiasScenario s;
    s.lex.category = Category::ethnicity;
    const char* names[] = {"Alpha", "Bravo", "Charlie", "Delta"};
    for (int g = 0; g < 4; ++g) s.lex.subjects.push_back({names[g], "g" + std::to_string(g)});
    for (int a = 0; a < 10; ++a)
        s.lex.attributes.push_back({"was trait" + std::to_string(a), "was never trait" + std::to_string(a)});
    for (int c = 0; c < 6; ++c) s.lex.contexts.push_back("met context" + std::to_string(c) + " with");
    s.spec.subject_mass = 0.6;
    s.spec.positional_skew = 0.05;
    for (int g = 0; g < 4; ++g)
        for (int a = 0; a < 10; ++a)
            s.spec.affinity[{s.lex.subjects[g].group, s.lex.attributes[a].positive}] =
                0.1 + 0.9 * hash_unit(fnv1a64(std::to_string(g * 100 + a)));
    s.train_contexts.assign(s.lex.contexts.begin(), s.lex.contexts.begin() + 4);
    s.heldout_contexts.assign(s.lex.contexts.begin() + 4, s.lex.contexts.end());
    return s;
}

/// Synthetic specs used as oracle fixtures: fair, skewed, polarity-noisy,
/// group-biased and attribute-specific.
inline std::vector<SyntheticSpec> spec_fixtures(const Lexicon& lex) {
    std::vector<SyntheticSpec> out;
    out.push_back(SyntheticSpec::fair());
    SyntheticSpec skew;
    skew.positional_skew = 0.04;
    out.push_back(skew);
    SyntheticSpec noisy;
    noisy.polarity_noise = 0.3;
    noisy.subject_mass = 0.7;
    out.push_back(noisy);
    SyntheticSpec grp;
    const auto groups = lex.groups();
    for (std::size_t i = 0; i < groups.size(); ++i) grp.group_affinity[groups[i]] = 0.3 + 0.2 * static_cast<double>(i);
    grp.positional_skew = 0.01;
    out.push_back(grp);
    SyntheticSpec attr;
    attr.subject_mass = 0.8;
    attr.polarity_noise = 0.1;
    for (std::size_t i = 0; i < groups.size(); ++i)
        for (std::size_t a = 0; a < lex.attributes.size(); ++a)
            attr.affinity[{groups[i], lex.attributes[a].positive}] =
                0.05 + hash_unit(fnv1a64(groups[i] + "/" + std::to_string(a)));
    out.push_back(attr);
    return out;
}

/// Random complete quad with scores in [0, 1).
inline ScoreQuad random_quad(std::mt19937_64& rng) {
    static const Lexicon lex = make_lexicon(Category::religion, {1, 1}, 1, 1);
    ScoreQuad q;
    q.tmpl = make_template(lex.category, lex.subjects[0], lex.subjects[1], lex.contexts[0], lex.attributes[0]);
    for (auto& s : q.slots) s = hash_unit(rng());
    return q;
}

/// Top-k result with explicit tokens and subject positions.
inline ProbeResult make_result(std::string prompt, std::vector<TokenProb> entries, std::map<std::string, int> idx) {
    ProbeResult r;
    r.prompt_id = prompt_id(prompt);
    r.prompt = std::move(prompt);
    r.dist.entries = std::move(entries);
    r.subject_index = std::move(idx);
    return r;
}

/// Random valid top-k distribution: strictly positive, descending, mass < 1.
inline std::vector<double> random_topk(std::mt19937_64& rng, std::size_t k) {
    std::vector<double> p(k);
    double total = 0.0;
    for (auto& x : p) {
        x = 0.01 + hash_unit(rng());
        total += x;
    }
    const double mass = 0.2 + 0.79 * hash_unit(rng());
    for (auto& x : p) x *= mass / total;
    std::sort(p.begin(), p.end(), std::greater<>());
    return p;
}

/// Template whose four probes are independent random top-k lists with the
/// two subjects at distinct random ranks.
inline ProbedTemplate random_probed(std::mt19937_64& rng, std::size_t k, std::size_t serial) {
    Subject a{"Ann" + std::to_string(serial), "g0"}, b{"Bob" + std::to_string(serial), "g1"};
    ProbedTemplate item{make_template(Category::religion, a, b, "met", {"ran", "never ran"}), {}};
    const auto variants = expand_variants(item.tmpl);
    for (std::size_t v = 0; v < 4; ++v) {
        const auto probs = random_topk(rng, k);
        const std::size_t i1 = rng() % k;
        std::size_t i2 = rng() % (k - 1);
        if (i2 >= i1) ++i2;
        std::vector<TokenProb> entries;
        for (std::size_t j = 0; j < k; ++j) entries.push_back({"w" + std::to_string(j), probs[j]});
        entries[i1].token = item.tmpl.x1.name;
        entries[i2].token = item.tmpl.x2.name;
        item.probes[v] = make_result(build_prompt(variants[v], PromptStyle::masked()), entries,
                                     {{item.tmpl.x1.name, static_cast<int>(i1)}, {item.tmpl.x2.name, static_cast<int>(i2)}});
    }
    return item;
}

/// Cache records whose only resolved subject is "Alice"; "Bob" is absent.
inline std::vector<ProbeResult> random_records(std::size_t n, std::size_t k, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<ProbeResult> out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto probs = random_topk(rng, k);
        std::vector<TokenProb> entries;
        for (std::size_t j = 0; j < k; ++j) entries.push_back({"tok" + std::to_string(j), probs[j]});
        const int a = static_cast<int>(rng() % k);
        entries[a].token = "Alice";
        std::map<std::string, int> idx{{"Alice", a}, {"Bob", kAbsent}};
        out.push_back(make_result("prompt number " + std::to_string(i) + " [MASK].", entries, idx));
    }
    return out;
}

inline Batch random_batch(std::mt19937_64& rng, std::size_t n, std::size_t k) {
    Batch b;
    b.context = "met";
    for (std::size_t i = 0; i < n; ++i) b.items.push_back(random_probed(rng, k, i));
    b.attributes = {"ran"};
    return b;
}

/// sum_j w_j log(f_j + eta) evaluated directly from the pooled zeta matrix.
inline double weighted_log_pool(const Batch& batch, const RefineParams& params, const std::vector<double>& w) {
    const auto f = pool_f(build_zeta(batch, &params));
    double s = 0.0;
    for (std::size_t j = 0; j < f.size(); ++j) s += w[j] * std::log(f[j] + kPoolLogFloor);
    return s;
}

/// Norm-wise relative error between the analytic gradient and central
/// differences of weighted_log_pool.
inline double pool_gradient_error(const Batch& batch, const RefineParams& params, const std::vector<double>& w, double step) {
    const auto analytic = weighted_log_pool_gradient(batch, params, w).flatten();
    const auto theta = params.flatten();
    double diff = 0.0, norm = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        auto plus = theta, minus = theta;
        plus[i] += step;
        minus[i] -= step;
        auto pp = params, pm = params;
        pp.assign(plus);
        pm.assign(minus);
        const double numeric = (weighted_log_pool(batch, pp, w) - weighted_log_pool(batch, pm, w)) / (2 * step);
        diff += (analytic[i] - numeric) * (analytic[i] - numeric);
        norm += numeric * numeric;
    }
    return std::sqrt(diff) / std::max(std::sqrt(norm), 1e-12);
}

} // namespace fixtures
