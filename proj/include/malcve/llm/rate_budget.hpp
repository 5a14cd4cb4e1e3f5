// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <mutex>

#include "malcve/util/rate_limiter.hpp"

namespace malcve::llm {

struct RateBudgetConfig {
    std::uint64_t tokens_per_minute = 200000;
    std::uint32_t requests_in_flight_max = 8;
};

/// Process-wide token budget for remote model calls: a 60 s sliding window
/// over granted tokens plus a cap on concurrent requests.
class RateBudget {
public:
    class Grant {
    public:
        Grant() = default;
        explicit Grant(RateBudget* owner, TimePoint at) : owner_(owner), at_(at) {}
        Grant(Grant&& o) noexcept : owner_(o.owner_), at_(o.at_) { o.owner_ = nullptr; }
        Grant& operator=(Grant&& o) noexcept {
            if (this != &o) {
                release();
                owner_ = o.owner_;
                at_ = o.at_;
                o.owner_ = nullptr;
            }
            return *this;
        }
        ~Grant() { release(); }
        TimePoint granted_at() const noexcept { return at_; }

    private:
        void release() {
            if (owner_) owner_->release_slot();
            owner_ = nullptr;
        }
        RateBudget* owner_ = nullptr;
        TimePoint at_{};
    };

    RateBudget(const RateBudgetConfig& cfg, Clock& clock)
        : cfg_(cfg), window_(cfg.tokens_per_minute, std::chrono::minutes(1), clock) {
        if (cfg.requests_in_flight_max == 0) throw ConfigError("requests_in_flight_max must be positive");
    }

    /// Waits for an in-flight slot and for `tokens` to fit in the window.
    Grant acquire(std::uint64_t tokens) {
        {
            std::unique_lock lock(mu_);
            cv_.wait(lock, [&] { return in_flight_ < cfg_.requests_in_flight_max; });
            ++in_flight_;
        }
        try {
            return Grant(this, window_.acquire(tokens));
        } catch (...) {
            release_slot();
            throw;
        }
    }

    const RateBudgetConfig& config() const noexcept { return cfg_; }

private:
    void release_slot() {
        {
            std::lock_guard lock(mu_);
            --in_flight_;
        }
        cv_.notify_one();
    }

    RateBudgetConfig cfg_;
    SlidingWindowLimiter window_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::uint32_t in_flight_ = 0;
};

}  // namespace malcve::llm
