// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <string>
#include <vector>

#include "malcve/cve_kb.hpp"
#include "malcve/util/files.hpp"
#include "malcve/util/http_client.hpp"

namespace malcve::kb {

struct NvdClientConfig {
    std::string base_url = "https://services.nvd.nist.gov/rest/json/cves/2.0";
    std::string api_key = env_or("MALCVE_NVD_API_KEY");
    std::size_t results_per_page = 2000;
    RetryPolicy retry{};
    /// The API rejects lastMod ranges longer than 120 days.
    std::chrono::hours max_range{24 * 120};
};

/// Pages through the NVD CVE API 2.0 `lastModStartDate`/`lastModEndDate`
/// query, splitting long ranges into API-sized windows.
class HttpNvdClient final : public NvdClient {
public:
    HttpNvdClient(NvdClientConfig cfg, HttpClient& http, Clock& clock)
        : cfg_(std::move(cfg)), http_(http), clock_(clock) {
        if (cfg_.results_per_page == 0) throw ConfigError("results_per_page must be positive");
    }

    std::vector<NvdEntry> fetch_modified(TimePoint since, TimePoint until) override {
        std::vector<NvdEntry> out;
        if (until < since) return out;
        for (TimePoint lo = since;;) {
            TimePoint hi = std::min<TimePoint>(until, lo + cfg_.max_range);
            fetch_window(lo, hi, out);
            if (hi >= until) break;
            lo = hi;
        }
        return out;
    }

    /// Query string for one page; exposed for tests.
    std::string page_url(TimePoint lo, TimePoint hi, std::size_t start_index) const {
        return cfg_.base_url + "?lastModStartDate=" + url_encode(nvd_time(lo)) +
               "&lastModEndDate=" + url_encode(nvd_time(hi)) + "&startIndex=" + std::to_string(start_index) +
               "&resultsPerPage=" + std::to_string(cfg_.results_per_page);
    }

private:
    static std::string nvd_time(TimePoint t) {
        auto s = format_utc(t, true);
        s.pop_back();  // 'Z'
        return s + "+00:00";
    }

    void fetch_window(TimePoint lo, TimePoint hi, std::vector<NvdEntry>& out) {
        std::size_t start = 0;
        for (;;) {
            HttpHeaders headers;
            if (!cfg_.api_key.empty()) headers.emplace("apiKey", cfg_.api_key);
            auto url = page_url(lo, hi, start);
            auto [resp, attempts] = with_retries(cfg_.retry, clock_, [&] { return http_.get(url, headers); });
            if (!resp.ok())
                throw RefreshError("NVD request failed after " + std::to_string(attempts) +
                                   " attempt(s): " + resp.describe());
            ParsedFeed page;
            try {
                page = parse_nvd_feed(nlohmann::json::parse(resp.body));
            } catch (const nlohmann::json::exception& e) {
                throw RefreshError(std::string("NVD response is not JSON: ") + e.what());
            } catch (const ParseError& e) {
                throw RefreshError(std::string("NVD response malformed: ") + e.what());
            }
            std::size_t got = page.entries.size();
            for (auto& e : page.entries) out.push_back(std::move(e));
            start += got;
            if (got == 0 || start >= page.meta.total_results) break;
        }
    }

    NvdClientConfig cfg_;
    HttpClient& http_;
    Clock& clock_;
};

}  // namespace malcve::kb
