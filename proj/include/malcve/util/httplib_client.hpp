// SPDX-License-Identifier: Apache-2.0
#pragma once

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include <chrono>
#include <string>

#include "malcve/errors.hpp"
#include "malcve/util/http_client.hpp"

namespace malcve {

/// HttpClient backed by cpp-httplib. A fresh connection per request keeps the
/// object stateless and thread-safe.
class HttplibClient final : public HttpClient {
public:
    explicit HttplibClient(std::chrono::seconds timeout = std::chrono::seconds(60)) : timeout_(timeout) {}

    HttpResponse get(const std::string& url, const HttpHeaders& headers) override {
        auto [origin, path] = split_url(url);
        httplib::Client cli(origin);
        configure(cli);
        return convert(cli.Get(path, to_headers(headers)));
    }

    HttpResponse post(const std::string& url, const HttpHeaders& headers, const std::string& body,
                      const std::string& content_type) override {
        auto [origin, path] = split_url(url);
        httplib::Client cli(origin);
        configure(cli);
        return convert(cli.Post(path, to_headers(headers), body, content_type));
    }

    /// "https://host:port/a/b?c" -> {"https://host:port", "/a/b?c"}
    static std::pair<std::string, std::string> split_url(const std::string& url) {
        auto scheme_end = url.find("://");
        if (scheme_end == std::string::npos) throw ConfigError("invalid URL (no scheme): " + url);
        auto path_start = url.find('/', scheme_end + 3);
        if (path_start == std::string::npos) return {url, "/"};
        return {url.substr(0, path_start), url.substr(path_start)};
    }

private:
    void configure(httplib::Client& cli) const {
        cli.set_connection_timeout(timeout_);
        cli.set_read_timeout(timeout_);
        cli.set_write_timeout(timeout_);
        cli.set_follow_location(true);
    }

    static httplib::Headers to_headers(const HttpHeaders& h) {
        httplib::Headers out;
        for (const auto& [k, v] : h) out.emplace(k, v);
        return out;
    }

    static HttpResponse convert(const httplib::Result& res) {
        HttpResponse out;
        if (!res) {
            out.error = httplib::to_string(res.error());
            return out;
        }
        out.status = res->status;
        out.body = res->body;
        return out;
    }

    std::chrono::seconds timeout_;
};

}  // namespace malcve
