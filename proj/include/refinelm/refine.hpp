#pragma once

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "refinelm/core.hpp"

namespace refinelm {

/// Weights of the k-in/k-out debiasing layer
///
///     z = log(p / sum(p) + eta) + W2 tanh(W1 p / sum(p) + b1) + b2
///     out = softmax(z)
///
/// Matrices are row-major: w1 is h x k, w2 is k x h.
struct RefineParams {
    std::size_t k = 0;
    std::size_t h = 0;
    std::vector<double> w1;
    std::vector<double> b1;
    std::vector<double> w2;
    std::vector<double> b2;

    static RefineParams zeros(std::size_t k, std::size_t h) {
        return {k, h, std::vector<double>(h * k), std::vector<double>(h), std::vector<double>(k * h), std::vector<double>(k)};
    }

    std::size_t size() const { return w1.size() + b1.size() + w2.size() + b2.size(); }

    void check_shape() const {
        if (k < 2 || h < 1 || w1.size() != h * k || b1.size() != h || w2.size() != k * h || b2.size() != k)
            throw DataError("refine params have inconsistent dimensions");
    }

    bool finite() const {
        auto ok = [](const std::vector<double>& v) {
            for (double x : v)
                if (!std::isfinite(x)) return false;
            return true;
        };
        return ok(w1) && ok(b1) && ok(w2) && ok(b2);
    }

    /// Visits every coefficient in checkpoint order (w1, b1, w2, b2).
    template <class F>
    void for_each(F&& f) {
        for (auto* v : {&w1, &b1, &w2, &b2})
            for (double& x : *v) f(x);
    }
    template <class F>
    void for_each(F&& f) const {
        for (const auto* v : {&w1, &b1, &w2, &b2})
            for (double x : *v) f(x);
    }

    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(size());
        for_each([&](double x) { out.push_back(x); });
        return out;
    }

    void assign(std::span<const double> flat) {
        if (flat.size() != size()) throw DataError("refine params: flat vector has wrong size");
        std::size_t i = 0;
        for_each([&](double& x) { x = flat[i++]; });
    }

    bool operator==(const RefineParams&) const = default;
};

using RefineGrad = RefineParams;

inline constexpr double kLogFloor = 1e-12;
inline constexpr double kInitOutputScale = 1e-3;
inline constexpr double kInitHiddenRange = 4.0;

inline std::size_t default_hidden(std::size_t k) { return 2 * k; }

/// Near-identity start: the output branch (w2, b2) is drawn at scale 1e-3 so
/// that the untrained layer reproduces the renormalised input.
inline RefineParams init_refine(std::size_t k, std::size_t h, std::uint64_t seed) {
    if (k < 2) throw ConfigError("refine: k must be at least 2");
    if (h < 1) throw ConfigError("refine: hidden width must be at least 1");
    std::mt19937_64 rng(seed);
    auto p = RefineParams::zeros(k, h);
    // Hand-rolled normal/uniform draws: std distributions are not reproducible across standard libraries.
    auto uniform = [&] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
    auto normal = [&] {
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    };
    // Inputs live on the simplex, so each hidden pre-activation is a convex
    // combination of one w1 row; U(-4, 4) keeps tanh input-sensitive there.
    for (double& x : p.w1) x = (2.0 * uniform() - 1.0) * kInitHiddenRange;
    for (double& x : p.b1) x = 2.0 * uniform() - 1.0;
    for (double& x : p.w2) x = normal() * kInitOutputScale;
    for (double& x : p.b2) x = normal() * kInitOutputScale;
    return p;
}

/// Intermediate values of one forward pass, kept for backward.
struct RefineTrace {
    std::vector<double> normalized;
    std::vector<double> hidden; // tanh activations
    std::vector<double> out;
};

inline RefineTrace forward_trace(const RefineParams& params, std::span<const double> p) {
    const std::size_t k = params.k, h = params.h;
    if (p.size() != k) throw DataError("refine forward: input has " + std::to_string(p.size()) + " entries, expected " + std::to_string(k));
    double total = 0.0;
    for (double x : p) {
        if (!(x >= 0.0) || !std::isfinite(x)) throw DataError("refine forward: negative or non-finite input");
        total += x;
    }
    if (!(total > 0.0)) throw DataError("refine forward: all-zero input");

    RefineTrace t;
    t.normalized.resize(k);
    for (std::size_t i = 0; i < k; ++i) t.normalized[i] = p[i] / total;

    t.hidden.resize(h);
    for (std::size_t j = 0; j < h; ++j) {
        double u = params.b1[j];
        for (std::size_t i = 0; i < k; ++i) u += params.w1[j * k + i] * t.normalized[i];
        t.hidden[j] = std::tanh(u);
    }

    std::vector<double> z(k);
    double zmax = -INFINITY;
    for (std::size_t i = 0; i < k; ++i) {
        double v = std::log(t.normalized[i] + kLogFloor) + params.b2[i];
        for (std::size_t j = 0; j < h; ++j) v += params.w2[i * h + j] * t.hidden[j];
        z[i] = v;
        zmax = std::max(zmax, v);
    }
    t.out.resize(k);
    double denom = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        t.out[i] = std::exp(z[i] - zmax);
        denom += t.out[i];
    }
    for (double& x : t.out) x /= denom;
    return t;
}

inline std::vector<double> forward(const RefineParams& params, std::span<const double> p) {
    return forward_trace(params, p).out;
}

/// Accumulates d(upstream . forward(params, p)) / d(params) into grad.
inline void backward_accumulate(const RefineParams& params, const RefineTrace& t, std::span<const double> upstream,
                                RefineGrad& grad) {
    const std::size_t k = params.k, h = params.h;
    if (upstream.size() != k) throw DataError("refine backward: upstream has wrong size");
    double dot = 0.0;
    for (std::size_t i = 0; i < k; ++i) dot += upstream[i] * t.out[i];
    std::vector<double> dz(k);
    for (std::size_t i = 0; i < k; ++i) dz[i] = t.out[i] * (upstream[i] - dot);

    std::vector<double> dhidden(h, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        grad.b2[i] += dz[i];
        for (std::size_t j = 0; j < h; ++j) {
            grad.w2[i * h + j] += dz[i] * t.hidden[j];
            dhidden[j] += params.w2[i * h + j] * dz[i];
        }
    }
    for (std::size_t j = 0; j < h; ++j) {
        const double du = dhidden[j] * (1.0 - t.hidden[j] * t.hidden[j]);
        grad.b1[j] += du;
        for (std::size_t i = 0; i < k; ++i) grad.w1[j * k + i] += du * t.normalized[i];
    }
}

inline RefineGrad backward(const RefineParams& params, std::span<const double> p, std::span<const double> upstream) {
    auto grad = RefineParams::zeros(params.k, params.h);
    backward_accumulate(params, forward_trace(params, p), upstream, grad);
    return grad;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointFormat = 1;

inline nlohmann::json to_json(const RefineParams& p) {
    return {{"format", kCheckpointFormat}, {"k", p.k}, {"h", p.h}, {"w1", p.w1}, {"b1", p.b1}, {"w2", p.w2}, {"b2", p.b2}};
}

inline RefineParams refine_params_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<int>() != kCheckpointFormat)
            throw DataError("checkpoint format " + std::to_string(j.at("format").get<int>()) + " unsupported");
        RefineParams p;
        p.k = j.at("k").get<std::size_t>();
        p.h = j.at("h").get<std::size_t>();
        p.w1 = j.at("w1").get<std::vector<double>>();
        p.b1 = j.at("b1").get<std::vector<double>>();
        p.w2 = j.at("w2").get<std::vector<double>>();
        p.b2 = j.at("b2").get<std::vector<double>>();
        p.check_shape();
        if (!p.finite()) throw DataError("checkpoint contains non-finite values");
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const std::string& path, const RefineParams& p) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint '" + path + "'");
    out << to_json(p).dump() << '\n';
    if (!out) throw DataError("write failed for checkpoint '" + path + "'");
}

inline RefineParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    try {
        return refine_params_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("checkpoint '" + path + "': " + e.what());
    }
}

} // namespace refinelm
