// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string_view>

namespace malcve {

/// Counts model tokens for a piece of text.
class TokenCounter {
public:
    virtual ~TokenCounter() = default;
    virtual std::uint64_t count(std::string_view text) const = 0;
};

/// Roughly four characters per token, rounded up.
class CharEstimateCounter final : public TokenCounter {
public:
    std::uint64_t count(std::string_view text) const override { return (text.size() + 3) / 4; }
};

inline const TokenCounter& default_token_counter() {
    static const CharEstimateCounter counter;
    return counter;
}

}  // namespace malcve
