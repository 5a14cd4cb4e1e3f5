// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <functional>
#include <string>

#include "malcve/errors.hpp"
#include "malcve/pipeline/work.hpp"
#include "malcve/util/clock.hpp"
#include "malcve/util/files.hpp"
#include "malcve/util/http_client.hpp"
#include "malcve/util/rate_limiter.hpp"
#include "malcve/util/sha256.hpp"

namespace malcve::pipeline {

struct FetchConfig {
    std::string url_template;  ///< `{sha256}` is replaced by the lowercase hash
    HttpHeaders headers;       ///< e.g. an authorization header
    std::uint64_t requests_per_interval = 4;
    std::chrono::milliseconds interval{1000};
    RetryPolicy retry{};

    void validate() const {
        if (url_template.find("{sha256}") == std::string::npos)
            throw ConfigError("download url_template must contain {sha256}");
        if (requests_per_interval == 0) throw ConfigError("download requests_per_interval must be positive");
        if (interval <= std::chrono::milliseconds::zero()) throw ConfigError("download interval must be positive");
    }
};

struct FetchOutcome {
    bool ok = false;
    std::string body;
    int attempts = 0;
    std::string diagnostic;
};

/// Fetches samples by hash under a requests-per-interval ceiling. Every
/// attempt, retries included, takes a slot.
class Fetcher {
public:
    Fetcher(FetchConfig cfg, HttpClient& http, Clock& clock)
        : cfg_((cfg.validate(), std::move(cfg))), http_(http), clock_(clock),
          limiter_(cfg_.requests_per_interval, cfg_.interval, clock) {}

    std::string url_for(std::string_view sha256) const {
        return text::replace_all(cfg_.url_template, "{sha256}", text::to_lower(sha256));
    }

    FetchOutcome fetch(std::string_view sha256) {
        const auto url = url_for(sha256);
        auto [resp, attempts] = with_retries(cfg_.retry, clock_, [&] {
            limiter_.acquire(1);
            return http_.get(url, cfg_.headers);
        });
        FetchOutcome out;
        out.attempts = attempts;
        if (!resp.ok()) {
            out.diagnostic = "download failed after " + std::to_string(attempts) + " attempt(s): " + resp.describe();
            return out;
        }
        auto got = sha256_hex(resp.body);
        if (got != text::to_lower(sha256)) {
            out.diagnostic = "payload hash mismatch: expected " + text::to_lower(sha256) + ", got " + got;
            return out;
        }
        out.ok = true;
        out.body = std::move(resp.body);
        return out;
    }

private:
    FetchConfig cfg_;
    HttpClient& http_;
    Clock& clock_;
    SlidingWindowLimiter limiter_;
};

/// Consumes queued_download items until `in` is closed. Verified payloads are
/// written to `dest_dir/<sha256>.jar` and pushed to `out` as
/// queued_analysis; failures go to `on_failed` and never reach `out`.
inline void download_worker(BlockingQueue<WorkItem>& in, BlockingQueue<WorkItem>& out, Fetcher& fetcher,
                            const fs::path& dest_dir, Journal* journal,
                            const std::function<void(WorkItem, std::string)>& on_failed) {
    fs::create_directories(dest_dir);
    while (auto item = in.pop()) {
        auto r = fetcher.fetch(item->sha256);
        item->attempts += r.attempts;
        if (!r.ok) {
            item->move_to(WorkState::failed);
            if (journal) journal->record(*item);
            on_failed(std::move(*item), r.diagnostic);
            continue;
        }
        fs::path p = dest_dir / (text::to_lower(item->sha256) + ".jar");
        try {
            write_file_atomic(p, r.body);
        } catch (const std::exception& e) {
            item->move_to(WorkState::failed);
            if (journal) journal->record(*item);
            on_failed(std::move(*item), std::string("cannot store download: ") + e.what());
            continue;
        }
        item->path = p;
        item->move_to(WorkState::downloaded);
        if (journal) journal->record(*item);
        item->move_to(WorkState::queued_analysis);
        if (journal) journal->record(*item);
        out.push(std::move(*item));
    }
}

}  // namespace malcve::pipeline
