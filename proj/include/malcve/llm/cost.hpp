// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <limits>
#include <map>
#include <mutex>
#include <string>

#include "malcve/errors.hpp"

namespace malcve::llm {

/// Prices in micro-currency per 1M tokens ($0.15/M is 150000).
struct ModelPrice {
    std::uint64_t input_per_m = 0;
    std::uint64_t output_per_m = 0;
    std::uint64_t embedding_per_m = 0;

    friend bool operator==(const ModelPrice&, const ModelPrice&) = default;
};

using PriceTable = std::map<std::string, ModelPrice>;

struct TokenCounters {
    std::uint64_t input = 0;
    std::uint64_t output = 0;
    std::uint64_t embedding = 0;

    friend bool operator==(const TokenCounters&, const TokenCounters&) = default;
};

/// Token counters per model and the running cost. Costs are kept as
/// token x price-per-million products, an integer in units of 1e-6
/// micro-currency, so totals are exact whatever the token counts.
class CostLedger {
public:
    explicit CostLedger(PriceTable prices = {}) : prices_(std::move(prices)) {}

    CostLedger(const CostLedger& o) {
        std::lock_guard lock(o.mu_);
        prices_ = o.prices_;
        counters_ = o.counters_;
        scaled_ = o.scaled_;
    }
    CostLedger& operator=(const CostLedger& o) {
        if (this == &o) return *this;
        CostLedger copy(o);
        std::lock_guard lock(mu_);
        prices_ = std::move(copy.prices_);
        counters_ = std::move(copy.counters_);
        scaled_ = copy.scaled_;
        return *this;
    }

    void charge(const std::string& model, std::uint64_t in_tokens, std::uint64_t out_tokens) {
        std::lock_guard lock(mu_);
        const auto& p = price(model);
        add(in_tokens, p.input_per_m);
        add(out_tokens, p.output_per_m);
        auto& c = counters_[model];
        c.input += in_tokens;
        c.output += out_tokens;
    }

    void charge_embedding(const std::string& model, std::uint64_t tokens) {
        std::lock_guard lock(mu_);
        add(tokens, price(model).embedding_per_m);
        counters_[model].embedding += tokens;
    }

    /// Adds another ledger's counters and cost (prices must agree).
    void merge(const CostLedger& o) {
        CostLedger other(o);
        std::lock_guard lock(mu_);
        for (const auto& [m, c] : other.counters_) {
            auto& mine = counters_[m];
            mine.input += c.input;
            mine.output += c.output;
            mine.embedding += c.embedding;
        }
        for (const auto& [m, p] : other.prices_) prices_.try_emplace(m, p);
        scaled_ = checked_add(scaled_, other.scaled_);
    }

    /// Exact total in units of 1e-12 currency (micro-currency times 1e-6).
    std::uint64_t total_scaled() const {
        std::lock_guard lock(mu_);
        return scaled_;
    }

    /// Total in micro-currency, rounded half up.
    std::uint64_t total_micros() const { return (total_scaled() + 500000) / 1000000; }

    /// Exact decimal rendering in currency units, e.g. "0.750000000000".
    std::string total_string() const { return format_scaled(total_scaled()); }

    static std::string format_scaled(std::uint64_t s) {
        std::string frac = std::to_string(s % 1000000000000ULL);
        frac.insert(0, 12 - frac.size(), '0');
        return std::to_string(s / 1000000000000ULL) + "." + frac;
    }

    std::map<std::string, TokenCounters> counters() const {
        std::lock_guard lock(mu_);
        return counters_;
    }

    const PriceTable& prices() const { return prices_; }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        nlohmann::ordered_json models = nlohmann::ordered_json::object();
        for (const auto& [m, c] : counters())
            models[m] = {{"input_tokens", c.input}, {"output_tokens", c.output}, {"embedding_tokens", c.embedding}};
        j["models"] = std::move(models);
        j["total_scaled_1e-12"] = total_scaled();
        j["total_micros"] = total_micros();
        j["total"] = total_string();
        return j;
    }

private:
    const ModelPrice& price(const std::string& model) const {
        auto it = prices_.find(model);
        if (it == prices_.end()) throw ConfigError("no price configured for model " + model);
        return it->second;
    }

    static std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
        if (a > std::numeric_limits<std::uint64_t>::max() - b) throw Error("cost ledger overflow");
        return a + b;
    }

    void add(std::uint64_t tokens, std::uint64_t price_per_m) {
        if (price_per_m != 0 && tokens > std::numeric_limits<std::uint64_t>::max() / price_per_m)
            throw Error("cost ledger overflow");
        scaled_ = checked_add(scaled_, tokens * price_per_m);
    }

    mutable std::mutex mu_;
    PriceTable prices_;
    std::map<std::string, TokenCounters> counters_;
    std::uint64_t scaled_ = 0;
};

inline PriceTable price_table_from_json(const nlohmann::json& j) {
    PriceTable t;
    if (!j.is_object()) throw ConfigError("price table must be an object keyed by model id");
    for (const auto& [model, p] : j.items()) {
        if (!p.is_object()) throw ConfigError("price entry for " + model + " must be an object");
        ModelPrice mp;
        mp.input_per_m = p.value("input_per_m", std::uint64_t{0});
        mp.output_per_m = p.value("output_per_m", std::uint64_t{0});
        mp.embedding_per_m = p.value("embedding_per_m", std::uint64_t{0});
        t[model] = mp;
    }
    return t;
}

}  // namespace malcve::llm
