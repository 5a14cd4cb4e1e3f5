// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>

#include "malcve/errors.hpp"

namespace malcve {

using TimePoint = std::chrono::system_clock::time_point;
using Duration = std::chrono::system_clock::duration;

/// Time source injected everywhere a timestamp or a wait is needed, so tests
/// can run on virtual time.
class Clock {
public:
    virtual ~Clock() = default;
    virtual TimePoint now() const = 0;
    virtual void sleep_until(TimePoint t) = 0;
    void sleep_for(Duration d) { sleep_until(now() + d); }
};

class SystemClock final : public Clock {
public:
    TimePoint now() const override { return std::chrono::system_clock::now(); }
    void sleep_until(TimePoint t) override { std::this_thread::sleep_until(t); }
};

/// Virtual time: sleeping advances the clock instantly. Thread-safe.
class ManualClock final : public Clock {
public:
    explicit ManualClock(TimePoint start = TimePoint{}) : now_(start) {}

    TimePoint now() const override {
        std::lock_guard lock(mu_);
        return now_;
    }
    void sleep_until(TimePoint t) override {
        std::lock_guard lock(mu_);
        if (t > now_) now_ = t;
    }
    void advance(Duration d) {
        std::lock_guard lock(mu_);
        now_ += d;
    }

private:
    mutable std::mutex mu_;
    TimePoint now_;
};

/// Always reports the same instant; waits return immediately. Used for golden
/// runs where timestamps must be byte-stable.
class FixedClock final : public Clock {
public:
    explicit FixedClock(TimePoint t) : t_(t) {}
    TimePoint now() const override { return t_; }
    void sleep_until(TimePoint) override {}

private:
    TimePoint t_;
};

// ---------------------------------------------------------------------------
// ISO-8601 (UTC)

/// "YYYY-MM-DDTHH:MM:SSZ", or with milliseconds when `millis` is set.
inline std::string format_utc(TimePoint t, bool millis = false) {
    using namespace std::chrono;
    auto secs = time_point_cast<seconds>(t);
    if (secs > t) secs -= seconds(1);
    auto ms = duration_cast<milliseconds>(t - secs).count();
    std::time_t tt = system_clock::to_time_t(secs);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[64];
    if (millis) {
        std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                      tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
    } else {
        std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02dZ", tm.tm_year + 1900,
                      tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec);
    }
    return buf;
}

/// Accepts "YYYY-MM-DD", "YYYY-MM-DDTHH:MM:SS", optional ".fff" fraction and
/// optional "Z" or "+hh:mm"/"-hh:mm" offset. No offset means UTC.
inline std::optional<TimePoint> parse_utc(std::string_view s) {
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
    auto digits = [&](std::size_t pos, std::size_t n, int& out) {
        if (pos + n > s.size()) return false;
        out = 0;
        for (std::size_t i = 0; i < n; ++i) {
            char c = s[pos + i];
            if (c < '0' || c > '9') return false;
            out = out * 10 + (c - '0');
        }
        return true;
    };
    if (!digits(0, 4, y) || s.size() < 10 || s[4] != '-' || !digits(5, 2, mo) || s[7] != '-' ||
        !digits(8, 2, d))
        return std::nullopt;
    std::size_t pos = 10;
    long frac_ms = 0;
    int offset_min = 0;
    if (pos < s.size() && (s[pos] == 'T' || s[pos] == ' ')) {
        if (!digits(pos + 1, 2, h) || s.size() < pos + 9 || s[pos + 3] != ':' ||
            !digits(pos + 4, 2, mi) || s[pos + 6] != ':' || !digits(pos + 7, 2, sec))
            return std::nullopt;
        pos += 9;
        if (pos < s.size() && s[pos] == '.') {
            ++pos;
            int scale = 100;
            while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') {
                frac_ms += (s[pos] - '0') * scale;
                scale /= 10;
                ++pos;
            }
        }
        if (pos < s.size()) {
            if (s[pos] == 'Z') {
                ++pos;
            } else if (s[pos] == '+' || s[pos] == '-') {
                int oh = 0, om = 0;
                if (!digits(pos + 1, 2, oh) || s.size() < pos + 6 || s[pos + 3] != ':' ||
                    !digits(pos + 4, 2, om))
                    return std::nullopt;
                offset_min = (oh * 60 + om) * (s[pos] == '+' ? 1 : -1);
                pos += 6;
            }
        }
    }
    if (pos != s.size()) return std::nullopt;
    if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || sec > 60) return std::nullopt;
    std::tm tm{};
    tm.tm_year = y - 1900;
    tm.tm_mon = mo - 1;
    tm.tm_mday = d;
    tm.tm_hour = h;
    tm.tm_min = mi;
    tm.tm_sec = sec;
    std::time_t tt = timegm(&tm);
    auto tp = std::chrono::system_clock::from_time_t(tt) + std::chrono::milliseconds(frac_ms) -
              std::chrono::minutes(offset_min);
    return tp;
}

inline TimePoint parse_utc_or_throw(std::string_view s) {
    auto t = parse_utc(s);
    if (!t) throw ConfigError("invalid UTC timestamp: '" + std::string(s) + "'");
    return *t;
}

}  // namespace malcve
