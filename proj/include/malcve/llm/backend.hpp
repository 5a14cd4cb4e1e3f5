// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

#include "malcve/errors.hpp"
#include "malcve/llm/rate_budget.hpp"
#include "malcve/util/files.hpp"
#include "malcve/util/http_client.hpp"
#include "malcve/util/tokens.hpp"

namespace malcve::llm {

struct ChatRequest {
    std::string step;      ///< "summarize", "queries" or "predict"
    std::string model_id;
    std::string prompt;
    std::optional<nlohmann::json> schema;  ///< JSON schema for constrained output
    int attempt = 0;       ///< 0 for the first try, 1 for the repair reprompt
};

struct ChatResponse {
    std::string text;
    std::uint64_t input_tokens = 0;
    std::uint64_t output_tokens = 0;
};

/// Shared by all workers; implementations must be thread-safe.
class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual ChatResponse complete(const ChatRequest& req) = 0;
    virtual std::string_view name() const = 0;
};

/// Replays canned responses from a script:
///   {"rules": [{"step": "summarize", "contains": ["marker", ...],
///               "responses": [<first try>, <repair try>, ...]}]}
/// The first rule whose step matches (or is absent) and whose every
/// `contains` string occurs in the prompt answers. The response is chosen by
/// attempt number, repeating the last one. A response given as a JSON
/// object or array is sent as its compact serialization. Token usage is
/// estimated from the texts.
class MockBackend final : public ChatBackend {
public:
    struct Rule {
        std::optional<std::string> step;
        std::vector<std::string> contains;
        std::vector<std::string> responses;
    };

    explicit MockBackend(std::vector<Rule> rules, const TokenCounter& counter = default_token_counter())
        : rules_(std::move(rules)), counter_(&counter) {}

    static MockBackend from_json(const nlohmann::json& script, const TokenCounter& counter = default_token_counter()) {
        if (!script.is_object() || !script.contains("rules") || !script["rules"].is_array())
            throw ConfigError("mock script needs a \"rules\" array");
        std::vector<Rule> rules;
        for (const auto& r : script["rules"]) {
            Rule rule;
            if (r.contains("step")) rule.step = r["step"].get<std::string>();
            if (r.contains("contains")) {
                const auto& c = r["contains"];
                if (c.is_string()) rule.contains.push_back(c.get<std::string>());
                else rule.contains = c.get<std::vector<std::string>>();
            }
            if (!r.contains("responses") || !r["responses"].is_array() || r["responses"].empty())
                throw ConfigError("mock rule needs a non-empty \"responses\" array");
            for (const auto& resp : r["responses"])
                rule.responses.push_back(resp.is_string() ? resp.get<std::string>() : resp.dump());
            rules.push_back(std::move(rule));
        }
        return MockBackend(std::move(rules), counter);
    }

    static MockBackend from_file(const fs::path& path, const TokenCounter& counter = default_token_counter()) {
        try {
            return from_json(nlohmann::json::parse(read_file(path)), counter);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("mock script " + path.string() + ": " + e.what());
        }
    }

    ChatResponse complete(const ChatRequest& req) override {
        for (const auto& r : rules_) {
            if (r.step && *r.step != req.step) continue;
            bool all = true;
            for (const auto& c : r.contains) {
                if (req.prompt.find(c) == std::string::npos) {
                    all = false;
                    break;
                }
            }
            if (!all) continue;
            std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(std::max(req.attempt, 0)), r.responses.size() - 1);
            const auto& text = r.responses[i];
            return {text, counter_->count(req.prompt), counter_->count(text)};
        }
        throw LlmTransportError("mock backend: no rule matches the " + req.step + " request");
    }

    std::string_view name() const override { return "mock"; }

private:
    std::vector<Rule> rules_;
    const TokenCounter* counter_;
};

struct ChatEndpoint {
    std::string url;      ///< full chat-completions URL
    std::string api_key;
};

/// OpenAI-compatible chat completions with JSON-schema output when the
/// request carries a schema. Retries transient HTTP failures.
class RemoteChatBackend final : public ChatBackend {
public:
    RemoteChatBackend(ChatEndpoint endpoint, HttpClient& http, Clock& clock, RateBudget* budget = nullptr,
                      RetryPolicy retry = {})
        : endpoint_(std::move(endpoint)), http_(http), clock_(clock), budget_(budget), retry_(retry) {
        if (endpoint_.url.empty()) throw ConfigError("LLM endpoint URL not configured (MALCVE_LLM_URL)");
    }

    ChatResponse complete(const ChatRequest& req) override {
        nlohmann::json body = {{"model", req.model_id},
                               {"temperature", 0},
                               {"messages", {{{"role", "user"}, {"content", req.prompt}}}}};
        if (req.schema)
            body["response_format"] = {{"type", "json_schema"},
                                       {"json_schema", {{"name", req.step}, {"strict", true}, {"schema", *req.schema}}}};
        HttpHeaders headers;
        if (!endpoint_.api_key.empty()) headers.emplace("Authorization", "Bearer " + endpoint_.api_key);
        const auto payload = body.dump();
        const auto est = default_token_counter().count(req.prompt);

        auto [resp, attempts] = with_retries(retry_, clock_, [&] {
            RateBudget::Grant grant;
            if (budget_) grant = budget_->acquire(std::min(est, budget_->config().tokens_per_minute));
            return http_.post(endpoint_.url, headers, payload, "application/json");
        });
        if (!resp.ok())
            throw LlmTransportError("chat request failed after " + std::to_string(attempts) +
                                    " attempt(s): " + resp.describe());
        try {
            auto j = nlohmann::json::parse(resp.body);
            ChatResponse out;
            out.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
            auto usage = j.value("usage", nlohmann::json::object());
            out.input_tokens = usage.value("prompt_tokens", est);
            out.output_tokens = usage.value("completion_tokens", default_token_counter().count(out.text));
            return out;
        } catch (const nlohmann::json::exception& e) {
            throw LlmTransportError(std::string("malformed chat response: ") + e.what());
        }
    }

    std::string_view name() const override { return "remote"; }

private:
    ChatEndpoint endpoint_;
    HttpClient& http_;
    Clock& clock_;
    RateBudget* budget_;
    RetryPolicy retry_;
};

}  // namespace malcve::llm
