// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <mutex>

#include "malcve/errors.hpp"
#include "malcve/util/clock.hpp"

namespace malcve {

/// Grants weighted requests so that the total weight granted inside any
/// window of length `window` never exceeds `capacity`. A grant made at time g
/// occupies the half-open interval [g, g + window).
class SlidingWindowLimiter {
public:
    SlidingWindowLimiter(std::uint64_t capacity, Duration window, Clock& clock)
        : capacity_(capacity), window_(window), clock_(clock) {
        if (capacity_ == 0) throw ConfigError("rate limiter capacity must be positive");
        if (window_ <= Duration::zero()) throw ConfigError("rate limiter window must be positive");
    }

    /// Blocks (on the injected clock) until `cost` fits, then records it.
    /// Returns the grant time.
    TimePoint acquire(std::uint64_t cost) {
        if (cost > capacity_)
            throw ConfigError("request of " + std::to_string(cost) + " exceeds window capacity " +
                              std::to_string(capacity_));
        for (;;) {
            TimePoint wake;
            {
                std::lock_guard lock(mu_);
                auto now = clock_.now();
                evict(now);
                if (used_ + cost <= capacity_) {
                    grants_.push_back({now, cost});
                    used_ += cost;
                    return now;
                }
                // Earliest instant at which enough old grants have expired.
                std::uint64_t freed = 0;
                wake = now;
                for (const auto& g : grants_) {
                    freed += g.cost;
                    wake = g.at + window_;
                    if (used_ - freed + cost <= capacity_) break;
                }
            }
            clock_.sleep_until(wake);
        }
    }

    std::uint64_t capacity() const noexcept { return capacity_; }
    Duration window() const noexcept { return window_; }

    std::uint64_t used_now() {
        std::lock_guard lock(mu_);
        evict(clock_.now());
        return used_;
    }

private:
    struct Grant {
        TimePoint at;
        std::uint64_t cost;
    };

    void evict(TimePoint now) {
        while (!grants_.empty() && grants_.front().at + window_ <= now) {
            used_ -= grants_.front().cost;
            grants_.pop_front();
        }
    }

    std::uint64_t capacity_;
    Duration window_;
    Clock& clock_;
    std::mutex mu_;
    std::deque<Grant> grants_;
    std::uint64_t used_ = 0;
};

}  // namespace malcve
