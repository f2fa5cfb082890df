#pragma once

#include <cstdint>
#include <iomanip>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace refinelm {

// Error families map onto distinct CLI exit codes.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class BackendError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CacheMiss : public BackendError {
public:
    explicit CacheMiss(std::string prompt_id)
        : BackendError("cache miss: prompt_id " + prompt_id), prompt_id_(std::move(prompt_id)) {}
    const std::string& prompt_id() const noexcept { return prompt_id_; }

private:
    std::string prompt_id_;
};

enum class Category { gender, nationality, ethnicity, religion };

inline std::string_view to_string(Category c) {
    switch (c) {
    case Category::gender: return "gender";
    case Category::nationality: return "nationality";
    case Category::ethnicity: return "ethnicity";
    case Category::religion: return "religion";
    }
    return "unknown";
}

inline Category parse_category(std::string_view s) {
    if (s == "gender") return Category::gender;
    if (s == "nationality") return Category::nationality;
    if (s == "ethnicity") return Category::ethnicity;
    if (s == "religion") return Category::religion;
    throw ConfigError("unknown category '" + std::string(s) + "'");
}

/// 64-bit FNV-1a. Stable across platforms and runs; used for template and prompt ids.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string to_hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

inline std::string prompt_id(std::string_view prompt) { return to_hex(fnv1a64(prompt)); }

/// Pairwise (cascade) summation; error grows O(log n) instead of O(n).
inline double pairwise_sum(std::span<const double> xs) {
    constexpr std::size_t kBlock = 32;
    if (xs.size() <= kBlock) {
        double s = 0.0;
        for (double x : xs) s += x;
        return s;
    }
    const std::size_t half = xs.size() / 2;
    return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

inline double pairwise_mean(std::span<const double> xs) {
    if (xs.empty()) throw DataError("mean of empty sequence");
    return pairwise_sum(xs) / static_cast<double>(xs.size());
}

/// Fisher-Yates driven by mt19937_64 so shuffles agree across standard libraries.
template <class T, class Rng>
void seeded_shuffle(std::vector<T>& xs, Rng& rng) {
    for (std::size_t i = xs.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(xs[i - 1], xs[j]);
    }
}

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_on(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.emplace_back(s.substr(start, pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

} // namespace refinelm
