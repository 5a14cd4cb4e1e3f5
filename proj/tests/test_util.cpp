// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "malcve/llm/rate_budget.hpp"
#include "malcve/util/clock.hpp"
#include "malcve/util/files.hpp"
#include "malcve/util/http_client.hpp"
#include "malcve/util/rate_limiter.hpp"
#include "malcve/util/sha256.hpp"
#include "malcve/util/text.hpp"
#include "malcve/util/tokens.hpp"

using namespace malcve;
using namespace std::chrono_literals;

TEST(Text, AlnumTokensLowercaseAndSplit) {
    EXPECT_EQ(text::alnum_tokens("sun.awt.SunToolkit"), (std::vector<std::string>{"sun", "awt", "suntoolkit"}));
    EXPECT_TRUE(text::alnum_tokens("...").empty());
    EXPECT_EQ(text::alnum_tokens("a\xc3\xa9" "b"), (std::vector<std::string>{"a", "b"}));
}

TEST(Text, IdPatterns) {
    EXPECT_TRUE(text::is_cve_id("CVE-2012-4681"));
    EXPECT_TRUE(text::is_cve_id("CVE-2021-123456"));
    EXPECT_FALSE(text::is_cve_id("CVE-2012-468"));
    EXPECT_FALSE(text::is_cve_id("cve-2012-4681"));
    EXPECT_TRUE(text::is_cwe_id("CWE-79"));
    EXPECT_FALSE(text::is_cwe_id("NVD-CWE-noinfo"));
    EXPECT_TRUE(text::is_hex_digest(std::string(64, 'a')));
    EXPECT_FALSE(text::is_hex_digest(std::string(63, 'a')));
}

TEST(Text, Utf16RoundTrip) {
    std::u16string s;
    text::append_utf16(s, U'h');
    text::append_utf16(s, 0x1F600);
    auto u8 = text::utf16_to_utf8(s);
    ASSERT_TRUE(u8);
    EXPECT_EQ(*u8, "h\xF0\x9F\x98\x80");
    std::u16string lone{char16_t(0xD800)};
    EXPECT_FALSE(text::utf16_to_utf8(lone));
}

TEST(Clock, FormatParseRoundTrip) {
    auto t = parse_utc_or_throw("2024-03-01T12:34:56Z");
    EXPECT_EQ(format_utc(t), "2024-03-01T12:34:56Z");
    EXPECT_EQ(format_utc(parse_utc_or_throw("2024-03-01T14:34:56+02:00")), "2024-03-01T12:34:56Z");
    EXPECT_EQ(format_utc(parse_utc_or_throw("2024-03-01T12:00:00.250"), true), "2024-03-01T12:00:00.250Z");
    EXPECT_FALSE(parse_utc("yesterday"));
    EXPECT_THROW(parse_utc_or_throw("2024-13"), ConfigError);
}

TEST(Sha256, KnownVectors) {
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Files, AtomicWriteAndTempDirCleanup) {
    fs::path where;
    {
        TempDir dir(fs::temp_directory_path());
        where = dir.path();
        write_file_atomic(where / "x.txt", "hello");
        EXPECT_EQ(read_file(where / "x.txt"), "hello");
    }
    EXPECT_FALSE(fs::exists(where));
}

TEST(Retry, BackoffScheduleAndAttemptCount) {
    ManualClock clock;
    RetryPolicy p;
    int calls = 0;
    auto [resp, attempts] = with_retries(p, clock, [&] {
        ++calls;
        return HttpResponse{503, "busy", ""};
    });
    EXPECT_EQ(resp.status, 503);
    EXPECT_EQ(attempts, 4);
    EXPECT_EQ(calls, 4);
    // 500 + 1000 + 2000 ms of virtual sleep.
    EXPECT_EQ(clock.now().time_since_epoch(), std::chrono::duration_cast<Duration>(3500ms));
}

TEST(Retry, NonRetryableStopsImmediately) {
    ManualClock clock;
    auto [resp, attempts] = with_retries(RetryPolicy{}, clock, [] { return HttpResponse{404, "", ""}; });
    EXPECT_EQ(attempts, 1);
}

TEST(SlidingWindow, NeverExceedsCapacityInAnyWindow) {
    ManualClock clock;
    SlidingWindowLimiter lim(10, 1s, clock);
    std::vector<std::pair<TimePoint, std::uint64_t>> grants;
    for (int i = 0; i < 50; ++i) {
        std::uint64_t cost = 1 + (i * 7) % 5;
        grants.emplace_back(lim.acquire(cost), cost);
    }
    for (const auto& [start, c] : grants) {
        std::uint64_t in_window = 0;
        for (const auto& [t, cost] : grants)
            if (t >= start && t < start + 1s) in_window += cost;
        EXPECT_LE(in_window, 10u);
    }
}

TEST(SlidingWindow, OversizedRequestRejected) {
    ManualClock clock;
    SlidingWindowLimiter lim(10, 1s, clock);
    EXPECT_THROW(lim.acquire(11), ConfigError);
}

TEST(RateBudget, WaitsForWindowToSlide) {
    ManualClock clock;
    llm::RateBudget budget({1000, 2}, clock);
    auto g1 = budget.acquire(800);
    auto g2 = budget.acquire(300);
    EXPECT_EQ(g2.granted_at() - g1.granted_at(), std::chrono::duration_cast<Duration>(60s));
}

TEST(Tokens, FourCharsPerToken) {
    EXPECT_EQ(default_token_counter().count(""), 0u);
    EXPECT_EQ(default_token_counter().count("abcd"), 1u);
    EXPECT_EQ(default_token_counter().count("abcde"), 2u);
}
