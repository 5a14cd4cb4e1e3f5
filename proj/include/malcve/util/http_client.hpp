// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>

#include "malcve/util/clock.hpp"

namespace malcve {

using HttpHeaders = std::multimap<std::string, std::string>;

struct HttpResponse {
    int status = 0;  ///< 0 when the request never produced an HTTP status
    std::string body;
    std::string error;  ///< transport diagnostics when status == 0

    bool ok() const { return status >= 200 && status < 300; }
    /// Transport failures, throttling and server errors are worth retrying.
    bool retryable() const { return status == 0 || status == 429 || status >= 500; }
    std::string describe() const {
        if (status == 0) return "transport error: " + error;
        std::string snippet = body.substr(0, 200);
        return "HTTP " + std::to_string(status) + (snippet.empty() ? "" : ": " + snippet);
    }
};

/// Minimal HTTP surface the library talks through. Implementations must be
/// safe to call from several threads.
class HttpClient {
public:
    virtual ~HttpClient() = default;
    virtual HttpResponse get(const std::string& url, const HttpHeaders& headers) = 0;
    virtual HttpResponse post(const std::string& url, const HttpHeaders& headers,
                              const std::string& body, const std::string& content_type) = 0;
};

/// Exponential backoff schedule shared by every remote client.
struct RetryPolicy {
    int max_retries = 3;
    std::chrono::milliseconds base_delay{500};
    double multiplier = 2.0;

    std::chrono::milliseconds delay_for(int attempt) const {
        double d = static_cast<double>(base_delay.count());
        for (int i = 0; i < attempt; ++i) d *= multiplier;
        return std::chrono::milliseconds(static_cast<std::int64_t>(d));
    }
};

/// Calls `request` until it returns a non-retryable response or the retry
/// budget is spent; sleeps on `clock` between attempts. Returns the last
/// response and the number of attempts made.
inline std::pair<HttpResponse, int> with_retries(const RetryPolicy& policy, Clock& clock,
                                                 const std::function<HttpResponse()>& request) {
    HttpResponse resp;
    int attempt = 0;
    for (;; ++attempt) {
        resp = request();
        if (!resp.retryable() || attempt >= policy.max_retries) break;
        clock.sleep_for(policy.delay_for(attempt));
    }
    return {std::move(resp), attempt + 1};
}

inline std::string url_encode(std::string_view s) {
    static constexpr char hex[] = "0123456789ABCDEF";
    std::string out;
    for (unsigned char c : s) {
        if ((c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '-' ||
            c == '_' || c == '.' || c == '~') {
            out.push_back(static_cast<char>(c));
        } else {
            out.push_back('%');
            out.push_back(hex[c >> 4]);
            out.push_back(hex[c & 0xF]);
        }
    }
    return out;
}

}  // namespace malcve
