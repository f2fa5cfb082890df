#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "refinelm/backend.hpp"
#include "refinelm/lexicon.hpp"
#include "refinelm/metrics.hpp"
#include "refinelm/parallel.hpp"
#include "refinelm/refine.hpp"

namespace refinelm {

inline constexpr double kPoolLogFloor = 1e-8;

struct TrainConfig {
    std::size_t k = 8;
    std::size_t h = 0; // 0 selects 2k
    double lr = 1e-2;
    std::size_t batch_size = 16;
    std::size_t steps = 2000;
    std::uint64_t seed = 0;
    double clip = 1.0;
    std::size_t eval_every = 100; // 0 disables periodic held-out evaluation
    std::size_t checkpoint_every = 0;
    PromptStyle style = PromptStyle::masked();
    std::size_t jobs = 1;

    std::size_t hidden() const { return h == 0 ? default_hidden(k) : h; }

    void validate() const {
        if (k < 2) throw ConfigError("train: k must be at least 2");
        if (!(lr > 0.0)) throw ConfigError("train: learning rate must be positive");
        if (batch_size < 2) throw ConfigError("train: batch size must be at least 2");
        if (!(clip > 0.0)) throw ConfigError("train: clip norm must be positive");
    }
};

/// A template together with the base-model probes of its four variants.
struct ProbedTemplate {
    TemplateInstance tmpl;
    TemplateProbes probes;
};

/// Templates sharing one context; attributes drawn from the set A.
struct Batch {
    std::string context;
    std::vector<std::string> attributes;
    std::vector<ProbedTemplate> items;
};

struct EligibleTemplates {
    std::vector<ProbedTemplate> items; // template order
    std::size_t skipped = 0;
};

/// Probes every template once and keeps those whose two subjects are present
/// in all four variants.
inline EligibleTemplates probe_eligible(const std::vector<TemplateInstance>& templates, const Backend& backend,
                                        std::size_t k, const PromptStyle& style, std::size_t jobs = 1) {
    std::vector<std::optional<ProbedTemplate>> slots(templates.size());
    parallel_for(templates.size(), jobs, [&](std::size_t i) {
        auto probes = probe_template(templates[i], backend, k, style);
        for (const auto& r : probes)
            if (!r.index_of(templates[i].x1.name) || !r.index_of(templates[i].x2.name)) return;
        slots[i] = ProbedTemplate{templates[i], std::move(probes)};
    });
    EligibleTemplates out;
    for (auto& s : slots) {
        if (s) out.items.push_back(std::move(*s));
        else ++out.skipped;
    }
    return out;
}

/// Seeded shuffle within each context, cut into batches of batch_size; a
/// trailing remainder of one template is dropped. Batch order is shuffled too.
inline std::vector<Batch> make_batches(const std::vector<ProbedTemplate>& eligible, std::size_t batch_size,
                                       std::uint64_t seed) {
    if (batch_size < 1) throw ConfigError("batch size must be positive");
    std::mt19937_64 rng(seed);
    std::map<std::string, std::vector<std::size_t>> by_context;
    for (std::size_t i = 0; i < eligible.size(); ++i) by_context[eligible[i].tmpl.context].push_back(i);
    std::vector<Batch> out;
    for (auto& [context, idx] : by_context) {
        seeded_shuffle(idx, rng);
        for (std::size_t start = 0; start < idx.size(); start += batch_size) {
            const std::size_t end = std::min(idx.size(), start + batch_size);
            if (end - start < 2 && batch_size >= 2) continue;
            Batch b;
            b.context = context;
            for (std::size_t i = start; i < end; ++i) {
                const auto& item = eligible[idx[i]];
                b.items.push_back(item);
                const auto& a = item.tmpl.attribute.positive;
                if (std::find(b.attributes.begin(), b.attributes.end(), a) == b.attributes.end()) b.attributes.push_back(a);
            }
            out.push_back(std::move(b));
        }
    }
    seeded_shuffle(out, rng);
    return out;
}

struct BatchPlan {
    std::vector<Batch> batches;
    std::size_t skipped = 0;
};

inline BatchPlan build_batches(const std::vector<TemplateInstance>& train_templates, const Backend& backend,
                               const TrainConfig& cfg) {
    if (train_templates.empty()) throw DataError("no training templates");
    auto eligible = probe_eligible(train_templates, backend, cfg.k, cfg.style, cfg.jobs);
    if (eligible.items.empty())
        throw DataError("no eligible templates (" + std::to_string(eligible.skipped) + " skipped with absent subjects)");
    return {make_batches(eligible.items, cfg.batch_size, cfg.seed), eligible.skipped};
}

/// Stacked 4x2 blocks of refined subject scores, one block per template.
/// Rows: (x1 first, a), (x2 first, a), (x1 first, not a), (x2 first, not a); columns: x1, x2.
struct ZetaMatrix {
    std::vector<std::array<double, 8>> blocks;

    std::size_t rows() const { return 4 * blocks.size(); }
    static constexpr std::size_t cols() { return 2; }
    double at(std::size_t row, std::size_t col) const { return blocks[row / 4][(row % 4) * 2 + col]; }
};

inline std::array<double, 8> zeta_block(const ScoreQuad& q) {
    if (!q.complete()) throw DataError("template " + q.tmpl.id_hex() + " has an absent subject score");
    std::array<double, 8> b{};
    for (std::size_t i = 0; i < 8; ++i) b[i] = *q.slots[i];
    return b;
}

inline ZetaMatrix build_zeta(const Batch& batch, const RefineParams* params) {
    ZetaMatrix z;
    z.blocks.reserve(batch.items.size());
    for (const auto& item : batch.items) z.blocks.push_back(zeta_block(quad_from_probes(item.tmpl, item.probes, params)));
    return z;
}

/// f_j = mean over i of the L1 distance between blocks i and j (i = j included).
inline std::vector<double> pool_f(const ZetaMatrix& zeta) {
    const std::size_t n = zeta.blocks.size();
    std::vector<double> f(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t e = 0; e < 8; ++e) s += std::abs(zeta.blocks[i][e] - zeta.blocks[j][e]);
        f[j] = s / static_cast<double>(n);
    }
    return f;
}

/// r_j = -|C| of template j under the refined layer.
inline std::vector<double> reward(const Batch& batch, const RefineParams* params) {
    std::vector<double> r;
    r.reserve(batch.items.size());
    for (const auto& item : batch.items) r.push_back(-std::abs(comparative_bias(quad_from_probes(item.tmpl, item.probes, params)).c));
    return r;
}

/// Largest of the eight refined subject scores. Diagnostic only.
inline double action_probability(const ProbedTemplate& item, const RefineParams* params) {
    const auto b = zeta_block(quad_from_probes(item.tmpl, item.probes, params));
    return *std::max_element(b.begin(), b.end());
}

/// Gradient of sum_j weights[j] * log(f_j + eta) with respect to the layer parameters.
inline RefineGrad weighted_log_pool_gradient(const Batch& batch, const RefineParams& params,
                                             std::span<const double> weights, double eta = kPoolLogFloor) {
    const std::size_t n = batch.items.size();
    if (weights.size() != n) throw DataError("weights/batch size mismatch");

    struct Prompt {
        RefineTrace trace;
        double mass = 0.0;
        std::size_t idx1 = 0, idx2 = 0;
    };
    std::vector<std::array<Prompt, 4>> prompts(n);
    std::vector<std::array<double, 8>> blocks(n);
    for (std::size_t m = 0; m < n; ++m) {
        const auto& item = batch.items[m];
        for (std::size_t v = 0; v < 4; ++v) {
            const auto& r = item.probes[v];
            const auto i1 = r.index_of(item.tmpl.x1.name);
            const auto i2 = r.index_of(item.tmpl.x2.name);
            if (!i1 || !i2) throw DataError("template " + item.tmpl.id_hex() + " has an absent subject score");
            auto& p = prompts[m][v];
            const auto probs = r.dist.probs();
            for (double x : probs) p.mass += x;
            p.trace = forward_trace(params, probs);
            p.idx1 = *i1;
            p.idx2 = *i2;
            blocks[m][v * 2 + 0] = p.mass * p.trace.out[p.idx1];
            blocks[m][v * 2 + 1] = p.mass * p.trace.out[p.idx2];
        }
    }

    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<double> a(n); // dJ/df_j
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t e = 0; e < 8; ++e) s += std::abs(blocks[i][e] - blocks[j][e]);
        a[j] = weights[j] / (s * inv_n + eta);
    }
    auto sign = [](double x) { return static_cast<double>((x > 0.0) - (x < 0.0)); };

    auto grad = RefineParams::zeros(params.k, params.h);
    std::vector<double> upstream(params.k);
    for (std::size_t m = 0; m < n; ++m) {
        for (std::size_t v = 0; v < 4; ++v) {
            std::array<double, 2> dzeta{};
            for (std::size_t c = 0; c < 2; ++c) {
                const std::size_t e = v * 2 + c;
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += (a[j] + a[m]) * sign(blocks[m][e] - blocks[j][e]);
                dzeta[c] = s * inv_n;
            }
            const auto& p = prompts[m][v];
            std::fill(upstream.begin(), upstream.end(), 0.0);
            upstream[p.idx1] += dzeta[0] * p.mass;
            upstream[p.idx2] += dzeta[1] * p.mass;
            backward_accumulate(params, p.trace, upstream, grad);
        }
    }
    return grad;
}

struct StepStats {
    double mean_reward = 0.0;
    double grad_norm = 0.0;   // before clipping
    double update_norm = 0.0; // lr * clipped gradient
    double f_mean = 0.0;
    double f_min = 0.0;
    double f_max = 0.0;
    std::size_t batch_size = 0;
    bool aborted = false;
};

/// One additive policy-gradient update:
///     delta = mean_j r_j grad log(f_j + eta),  theta' = theta + lr clip(delta)
inline std::pair<RefineParams, StepStats> step(const RefineParams& params, const Batch& batch, const TrainConfig& cfg) {
    if (batch.items.size() < 2) throw ConfigError("step: batch needs at least 2 templates");
    StepStats st;
    st.batch_size = batch.items.size();
    const auto r = reward(batch, &params);
    const auto f = pool_f(build_zeta(batch, &params));
    st.mean_reward = pairwise_mean(r);
    st.f_mean = pairwise_mean(f);
    st.f_min = *std::min_element(f.begin(), f.end());
    st.f_max = *std::max_element(f.begin(), f.end());

    std::vector<double> weights(r.size());
    for (std::size_t j = 0; j < r.size(); ++j) weights[j] = r[j] / static_cast<double>(r.size());
    const auto delta = weighted_log_pool_gradient(batch, params, weights);

    double sq = 0.0;
    delta.for_each([&](double x) { sq += x * x; });
    st.grad_norm = std::sqrt(sq);
    if (!std::isfinite(st.grad_norm)) {
        st.aborted = true;
        return {params, st};
    }
    const double scale = st.grad_norm > cfg.clip ? cfg.clip / st.grad_norm : 1.0;
    st.update_norm = cfg.lr * scale * st.grad_norm;

    RefineParams next = params;
    auto d = delta.flatten();
    std::size_t i = 0;
    next.for_each([&](double& x) { x += cfg.lr * scale * d[i++]; });
    return {std::move(next), st};
}

struct HeldoutEval {
    double mu = 0.0;
    double avg_positional = 0.0;
    double avg_attributive = 0.0;
    std::size_t templates = 0;
};

inline HeldoutEval evaluate_heldout(const std::vector<ProbedTemplate>& heldout, const std::vector<std::string>& groups,
                                    const RefineParams* params) {
    std::vector<TemplateBias> biases;
    biases.reserve(heldout.size());
    for (const auto& item : heldout) biases.push_back(comparative_bias(quad_from_probes(item.tmpl, item.probes, params)));
    const auto rep = aggregate(biases, groups);
    return {rep.mu, rep.avg_positional, rep.avg_attributive, biases.size()};
}

struct StepLog {
    std::size_t step = 0;
    StepStats stats;
    double elapsed_s = 0.0;
    std::size_t skipped = 0;
    std::optional<HeldoutEval> heldout;
};

inline nlohmann::json to_json(const StepLog& l) {
    nlohmann::json j{{"step", l.step},
                     {"mean_reward", l.stats.mean_reward},
                     {"update_norm", l.stats.update_norm},
                     {"grad_norm", l.stats.grad_norm},
                     {"f_mean", l.stats.f_mean},
                     {"f_min", l.stats.f_min},
                     {"f_max", l.stats.f_max},
                     {"aborted", l.stats.aborted},
                     {"elapsed", l.elapsed_s},
                     {"skipped", l.skipped}};
    if (l.heldout)
        j["heldout"] = {{"mu", l.heldout->mu}, {"avg_positional", l.heldout->avg_positional},
                        {"avg_attributive", l.heldout->avg_attributive}};
    return j;
}

struct TrainResult {
    RefineParams params;
    std::optional<HeldoutEval> initial;
    std::optional<HeldoutEval> final;
    std::size_t skipped = 0;
    std::size_t aborted_steps = 0;
};

struct TrainHooks {
    std::function<void(std::size_t step, const RefineParams&)> checkpoint;
    std::function<void(const StepLog&)> log;
};

/// Runs the step budget over reshuffled epochs of context-pure batches.
/// Held-out templates (may be empty) are measured at start, every
/// eval_every steps and at the end.
inline TrainResult train(const std::vector<TemplateInstance>& train_templates,
                         const std::vector<TemplateInstance>& heldout_templates, const std::vector<std::string>& groups,
                         const Backend& backend, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
    cfg.validate();
    TrainResult res;
    res.params = init_refine(cfg.k, cfg.hidden(), cfg.seed);

    std::vector<ProbedTemplate> heldout;
    if (!heldout_templates.empty()) {
        heldout = probe_eligible(heldout_templates, backend, cfg.k, cfg.style, cfg.jobs).items;
        if (!heldout.empty()) res.initial = evaluate_heldout(heldout, groups, &res.params);
    }
    if (cfg.steps == 0) {
        res.final = res.initial;
        if (hooks.checkpoint) hooks.checkpoint(0, res.params);
        return res;
    }

    if (train_templates.empty()) throw DataError("no training templates");
    auto eligible = probe_eligible(train_templates, backend, cfg.k, cfg.style, cfg.jobs);
    res.skipped = eligible.skipped;
    if (eligible.items.empty())
        throw DataError("no eligible templates (" + std::to_string(eligible.skipped) + " skipped with absent subjects)");

    const auto start = std::chrono::steady_clock::now();
    std::size_t done = 0;
    for (std::uint64_t epoch = 0; done < cfg.steps; ++epoch) {
        const auto batches = make_batches(eligible.items, cfg.batch_size, cfg.seed + 0x9e3779b97f4a7c15ULL * epoch);
        if (batches.empty()) throw DataError("no batch with at least 2 eligible templates");
        for (const auto& batch : batches) {
            if (done == cfg.steps) break;
            auto [next, st] = step(res.params, batch, cfg);
            res.params = std::move(next);
            if (st.aborted) ++res.aborted_steps;
            ++done;

            StepLog log;
            log.step = done;
            log.stats = st;
            log.skipped = eligible.skipped;
            log.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            if (!heldout.empty() && cfg.eval_every != 0 && done % cfg.eval_every == 0)
                log.heldout = evaluate_heldout(heldout, groups, &res.params);
            if (hooks.log) hooks.log(log);
            if (hooks.checkpoint && cfg.checkpoint_every != 0 && done % cfg.checkpoint_every == 0)
                hooks.checkpoint(done, res.params);
        }
    }
    if (!heldout.empty()) res.final = evaluate_heldout(heldout, groups, &res.params);
    const bool just_saved = cfg.checkpoint_every != 0 && done % cfg.checkpoint_every == 0;
    if (hooks.checkpoint && !just_saved) hooks.checkpoint(done, res.params);
    return res;
}

} // namespace refinelm
