#pragma once

#include <chrono>
#include <memory>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "refinelm/backend.hpp"

namespace refinelm {

struct HttpOptions {
    std::chrono::milliseconds timeout{30000};
    std::size_t retries = 2; // extra attempts after the first on transport failure
    std::size_t max_in_flight = 8;
};

/// POST {base}/probe with {"prompt", "k", "subjects"}; the response body is a
/// cache record. One request per probe, blocking.
class HttpBackend final : public Backend {
public:
    HttpBackend(std::string endpoint, HttpOptions opts)
        : endpoint_(std::move(endpoint)), opts_(opts), slots_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(1, opts.max_in_flight))) {
        const auto scheme = endpoint_.find("://");
        if (scheme == std::string::npos || endpoint_.substr(0, scheme) != "http")
            throw ConfigError("http backend: endpoint must start with http:// (got '" + endpoint_ + "')");
        const auto path = endpoint_.find('/', scheme + 3);
        host_ = endpoint_.substr(0, path);
        base_path_ = path == std::string::npos ? "" : endpoint_.substr(path);
        while (!base_path_.empty() && base_path_.back() == '/') base_path_.pop_back();
    }

    std::string describe() const override { return "http:" + endpoint_; }

protected:
    ProbeResult do_probe(const std::string& prompt, const std::vector<std::string>& subjects,
                         std::size_t k) const override {
        const std::string body = json{{"prompt", prompt}, {"k", k}, {"subjects", subjects}}.dump();
        std::string last_error;
        for (std::size_t attempt = 0; attempt <= opts_.retries; ++attempt) {
            httplib::Result res;
            {
                slots_.acquire();
                struct Release {
                    std::counting_semaphore<>& s;
                    ~Release() { s.release(); }
                } release{slots_};
                httplib::Client cli(host_);
                cli.set_connection_timeout(opts_.timeout);
                cli.set_read_timeout(opts_.timeout);
                cli.set_write_timeout(opts_.timeout);
                res = cli.Post(base_path_ + "/probe", body, "application/json");
            }
            if (!res) {
                last_error = httplib::to_string(res.error());
                continue;
            }
            if (res->status < 200 || res->status >= 300)
                throw BackendError("http backend: status " + std::to_string(res->status) + " from " + endpoint_);
            ProbeResult r;
            try {
                r = probe_result_from_json(json::parse(res->body));
            } catch (const std::exception& e) {
                throw BackendError(std::string("http backend: malformed response: ") + e.what());
            }
            if (r.dist.k() != k)
                throw BackendError("http backend: malformed response: " + std::to_string(r.dist.k()) + " entries, expected " +
                                   std::to_string(k));
            if (r.prompt != prompt) throw BackendError("http backend: malformed response: prompt mismatch");
            for (const auto& name : subjects) r.subject_index.try_emplace(name, kAbsent);
            try {
                r.validate();
            } catch (const DataError& e) {
                throw BackendError(std::string("http backend: malformed response: ") + e.what());
            }
            return r;
        }
        throw BackendError("http backend: transport error after " + std::to_string(opts_.retries + 1) +
                           " attempt(s) to " + endpoint_ + ": " + last_error);
    }

private:
    std::string endpoint_;
    std::string host_;
    std::string base_path_;
    HttpOptions opts_;
    mutable std::counting_semaphore<> slots_;
};

inline std::unique_ptr<HttpBackend> open_http(std::string endpoint, HttpOptions opts = {}) {
    return std::make_unique<HttpBackend>(std::move(endpoint), opts);
}

} // namespace refinelm
