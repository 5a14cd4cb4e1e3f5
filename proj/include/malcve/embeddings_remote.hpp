// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "malcve/embeddings.hpp"
#include "malcve/llm/rate_budget.hpp"
#include "malcve/util/http_client.hpp"

namespace malcve::embed {

struct RemoteEndpoint {
    std::string url;      ///< full URL of the embeddings endpoint
    std::string api_key;  ///< sent as a bearer token when non-empty
};

/// OpenAI-compatible embeddings endpoint:
///   POST {"model": id, "input": [texts...]}
///   -> {"data": [{"index": i, "embedding": [...]}], "usage": {"total_tokens": n}}
/// Texts are sent in chunks of `request_batch_size`; transient failures are
/// retried with exponential backoff.
class RemoteEmbedder final : public EmbeddingProvider {
public:
    RemoteEmbedder(EmbeddingConfig cfg, RemoteEndpoint endpoint, HttpClient& http, Clock& clock,
                   llm::RateBudget* budget = nullptr,
                   std::chrono::milliseconds base_delay = std::chrono::milliseconds(500))
        : cfg_(std::move(cfg)), endpoint_(std::move(endpoint)), http_(http), clock_(clock), budget_(budget) {
        cfg_.validate();
        if (endpoint_.url.empty()) throw ConfigError("remote embedding endpoint URL not configured");
        retry_.max_retries = cfg_.max_retries;
        retry_.base_delay = base_delay;
    }

    std::size_t dim() const override { return cfg_.dim; }
    const std::string& model_id() const override { return cfg_.model_id; }

    std::vector<Vector> embed_batch(std::span<const std::string> texts, EmbedUsage* usage = nullptr) override {
        check_texts(texts);
        std::vector<Vector> out;
        out.reserve(texts.size());
        for (std::size_t start = 0; start < texts.size(); start += cfg_.request_batch_size) {
            auto n = std::min(cfg_.request_batch_size, texts.size() - start);
            auto chunk = request_chunk(texts.subspan(start, n), start, usage);
            for (auto& v : chunk) out.push_back(std::move(v));
        }
        return out;
    }

private:
    std::vector<Vector> request_chunk(std::span<const std::string> chunk, std::size_t offset,
                                      EmbedUsage* usage) {
        nlohmann::json body = {{"model", cfg_.model_id}, {"input", chunk}};
        HttpHeaders headers;
        if (!endpoint_.api_key.empty()) headers.emplace("Authorization", "Bearer " + endpoint_.api_key);
        auto payload = body.dump();

        std::uint64_t est = 0;
        for (const auto& t : chunk) est += default_token_counter().count(t);

        auto [resp, attempts] = with_retries(retry_, clock_, [&] {
            llm::RateBudget::Grant grant;
            if (budget_) grant = budget_->acquire(std::min(est, budget_->config().tokens_per_minute));
            return http_.post(endpoint_.url, headers, payload, "application/json");
        });
        if (usage) usage->requests += static_cast<std::uint64_t>(attempts);
        auto idx = static_cast<std::ptrdiff_t>(offset);
        if (!resp.ok())
            throw EmbeddingError("embedding request failed after " + std::to_string(attempts) +
                                     " attempt(s): " + resp.describe(),
                                 idx);

        nlohmann::json parsed;
        try {
            parsed = nlohmann::json::parse(resp.body);
        } catch (const nlohmann::json::exception& e) {
            throw EmbeddingError(std::string("embedding response is not JSON: ") + e.what(), idx);
        }
        const auto& data = parsed.value("data", nlohmann::json::array());
        if (!data.is_array() || data.size() != chunk.size())
            throw EmbeddingError("embedding response has " + std::to_string(data.size()) +
                                     " vectors for " + std::to_string(chunk.size()) + " inputs",
                                 idx);

        std::vector<Vector> out(chunk.size());
        for (std::size_t i = 0; i < data.size(); ++i) {
            const auto& item = data[i];
            std::size_t pos = item.value("index", i);
            if (pos >= chunk.size() || !item.contains("embedding"))
                throw EmbeddingError("malformed embedding item", idx + static_cast<std::ptrdiff_t>(i));
            Vector v = item["embedding"].get<Vector>();
            if (v.size() != cfg_.dim)
                throw EmbeddingError("embedding has dimension " + std::to_string(v.size()) + ", expected " +
                                         std::to_string(cfg_.dim),
                                     idx + static_cast<std::ptrdiff_t>(pos));
            for (float f : v)
                if (!std::isfinite(f))
                    throw EmbeddingError("embedding contains a non-finite value",
                                         idx + static_cast<std::ptrdiff_t>(pos));
            out[pos] = std::move(v);
        }
        if (usage) {
            auto u = parsed.value("usage", nlohmann::json::object());
            usage->tokens += u.is_object() ? u.value("total_tokens", est) : est;
        }
        return out;
    }

    EmbeddingConfig cfg_;
    RemoteEndpoint endpoint_;
    HttpClient& http_;
    Clock& clock_;
    llm::RateBudget* budget_;
    RetryPolicy retry_;
};

}  // namespace malcve::embed
