// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "malcve/errors.hpp"
#include "malcve/llm/backend.hpp"
#include "malcve/llm/cost.hpp"
#include "malcve/llm/prompts.hpp"
#include "malcve/llm/types.hpp"
#include "malcve/util/sha256.hpp"
#include "malcve/util/text.hpp"
#include "malcve/util/tokens.hpp"

namespace malcve::llm {

struct ModelHandle {
    std::string model_id;
    std::uint64_t context_limit = 128000;  ///< prompt tokens
};

struct Exchange {
    std::string step;
    std::string model;
    int attempt = 0;
    std::string prompt_sha256;
    std::string response;  ///< verbatim model output
    std::uint64_t input_tokens = 0;
    std::uint64_t output_tokens = 0;
};

/// Every model call made for one file, in order.
class Transcript {
public:
    void add(Exchange e) {
        std::lock_guard lock(mu_);
        entries_.push_back(std::move(e));
    }

    std::vector<Exchange> entries() const {
        std::lock_guard lock(mu_);
        return entries_;
    }

    OrderedJson to_json() const {
        OrderedJson arr = OrderedJson::array();
        for (const auto& e : entries())
            arr.push_back({{"step", e.step},
                           {"model", e.model},
                           {"attempt", e.attempt},
                           {"prompt_sha256", e.prompt_sha256},
                           {"response", e.response},
                           {"input_tokens", e.input_tokens},
                           {"output_tokens", e.output_tokens}});
        return arr;
    }

private:
    mutable std::mutex mu_;
    std::vector<Exchange> entries_;
};

struct CandidateCve {
    std::string id;
    std::string description;
};

inline constexpr std::size_t kMaxQueries = 10;
inline constexpr std::size_t kMaxCandidates = 10;

/// Strips list numbering, bullets and wrapping quotes from model output
/// lines, then drops blanks and case-insensitive duplicates.
inline std::vector<std::string> parse_query_lines(std::string_view raw, std::size_t cap = kMaxQueries) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& line : text::split_lines(raw)) {
        std::string_view s = text::trim(line);
        std::size_t i = 0;
        while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
        if (i > 0 && i < s.size() && (s[i] == '.' || s[i] == ')')) s.remove_prefix(i + 1);
        else if (!s.empty() && (s[0] == '-' || s[0] == '*')) s.remove_prefix(1);
        else if (s.substr(0, 3) == "\xE2\x80\xA2") s.remove_prefix(3);
        s = text::trim(s);
        if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front())
            s = text::trim(s.substr(1, s.size() - 2));
        if (s.empty()) continue;
        if (!seen.insert(text::to_lower(s)).second) continue;
        out.emplace_back(s);
        if (out.size() == cap) break;
    }
    return out;
}

inline std::string render_files(const std::vector<std::string>& files) {
    std::string out;
    for (std::size_t i = 0; i < files.size(); ++i) {
        if (i) out += "\n\n";
        out += "File " + std::to_string(i + 1) + ":\n" + files[i];
    }
    return out;
}

inline std::string render_candidates(const std::vector<CandidateCve>& cands) {
    std::string out;
    for (const auto& c : cands) out += "- " + c.id + ": " + c.description + "\n";
    return out;
}

/// The three analysis calls. Each call is checked against the model's
/// context window before sending, recorded in the transcript and charged to
/// the ledger. Structured answers that fail validation get one repair
/// reprompt carrying the validation error.
class LlmClient {
public:
    LlmClient(ChatBackend& backend, const PromptSet& prompts, CostLedger* ledger = nullptr,
              const TokenCounter& counter = default_token_counter())
        : backend_(backend), prompts_(prompts), ledger_(ledger), counter_(counter) {}

    CodeSummary summarize_code(const ModelHandle& model, const std::vector<std::string>& files,
                               Transcript& transcript) {
        auto prompt = render(prompts_.summarize.text, {{"files", render_files(files)}});
        return structured<CodeSummary>("summarize", model, prompt, summary_schema(), transcript,
                                       [](const Json& j) { return validate_summary(j); });
    }

    std::vector<std::string> generate_queries(const ModelHandle& model, const CodeSummary& summary,
                                              Transcript& transcript) {
        auto prompt = render(prompts_.queries.text, {{"summary", to_json(summary).dump(2)}});
        for (int attempt = 0; attempt < 2; ++attempt) {
            auto resp = call("queries", model, prompt, std::nullopt, attempt, transcript);
            auto q = parse_query_lines(resp.text);
            if (!q.empty()) return q;
        }
        std::string joined;
        for (const auto& k : summary.cve_search_queries.keywords) joined += k + "\n";
        return parse_query_lines(joined);
    }

    CvePrediction predict_cve(const ModelHandle& model, const CodeSummary& summary,
                              const std::vector<CandidateCve>& candidates, const std::string& code,
                              Transcript& transcript) {
        if (candidates.empty() || candidates.size() > kMaxCandidates)
            throw PreconditionError("prediction needs between 1 and " + std::to_string(kMaxCandidates) +
                                    " candidates, got " + std::to_string(candidates.size()));
        std::vector<std::string> ids;
        for (const auto& c : candidates) ids.push_back(c.id);
        auto prompt = render(prompts_.predict.text, {{"summary", to_json(summary).dump(2)},
                                                     {"cves", render_candidates(candidates)},
                                                     {"code", code}});
        return structured<CvePrediction>("predict", model, prompt, prediction_schema(), transcript,
                                         [&](const Json& j) { return validate_prediction(j, ids); });
    }

private:
    ChatResponse call(const std::string& step, const ModelHandle& model, const std::string& prompt,
                      const std::optional<Json>& schema, int attempt, Transcript& transcript) {
        auto tokens = counter_.count(prompt);
        if (tokens > model.context_limit) throw ContextTooLarge(tokens, model.context_limit);
        auto resp = backend_.complete({step, model.model_id, prompt, schema, attempt});
        transcript.add({step, model.model_id, attempt, sha256_hex(prompt), resp.text, resp.input_tokens,
                        resp.output_tokens});
        if (ledger_) ledger_->charge(model.model_id, resp.input_tokens, resp.output_tokens);
        return resp;
    }

    template <typename T, typename Validate>
    T structured(const std::string& step, const ModelHandle& model, const std::string& prompt, const Json& schema,
                 Transcript& transcript, Validate validate) {
        std::string current = prompt;
        std::string error;
        std::string raw;
        for (int attempt = 0; attempt < 2; ++attempt) {
            auto resp = call(step, model, current, std::optional<Json>(schema), attempt, transcript);
            raw = resp.text;
            auto parsed = parse_json_response(raw);
            if (parsed.value) {
                auto v = validate(*parsed.value);
                if (v.value) return std::move(*v.value);
                error = v.error;
            } else {
                error = parsed.error;
            }
            current = prompt + "\n\nYour previous answer was rejected: " + error +
                      "\nReply again with only a JSON object that fixes these problems.";
        }
        throw SchemaError(step + " response failed validation after a repair attempt: " + error, raw);
    }

    ChatBackend& backend_;
    const PromptSet& prompts_;
    CostLedger* ledger_;
    const TokenCounter& counter_;
};

}  // namespace malcve::llm
