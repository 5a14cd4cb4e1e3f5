// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <optional>
#include <set>
#include <string>

#include "malcve/embeddings.hpp"
#include "malcve/embeddings_remote.hpp"
#include "malcve/errors.hpp"
#include "malcve/index_io.hpp"
#include "malcve/llm/backend.hpp"
#include "malcve/llm/cost.hpp"
#include "malcve/llm/rate_budget.hpp"
#include "malcve/pipeline/analysis.hpp"
#include "malcve/pipeline/download.hpp"
#include "malcve/util/files.hpp"

namespace malcve::config {

enum class LlmKind { remote, mock };

struct LlmSetup {
    LlmKind kind = LlmKind::remote;
    fs::path mock_script;  ///< for kind == mock
    llm::ChatEndpoint endpoint{env_or("MALCVE_LLM_URL"), env_or("MALCVE_LLM_API_KEY")};
    RetryPolicy retry{};
};

/// Everything the command line tool reads from its JSON configuration file.
struct AppConfig {
    pipeline::PipelineConfig pipeline;
    index::IndexConfig index;
    embed::EmbeddingConfig embedding{embed::Provider::local_deterministic, "hashed-bow-v1", 256, 64, 3};
    embed::RemoteEndpoint embedding_endpoint{env_or("MALCVE_EMBED_URL"), env_or("MALCVE_EMBED_API_KEY")};
    LlmSetup llm;
    llm::RateBudgetConfig rate_budget;
    llm::PriceTable prices{{"gpt-4o-mini", {150000, 600000, 0}},
                           {"text-embedding-3-small", {0, 0, 20000}},
                           {"hashed-bow-v1", {0, 0, 0}}};
    std::optional<pipeline::FetchConfig> download;
    fs::path work_dir = fs::temp_directory_path() / "malcve-work";

    void validate() const {
        pipeline.validate();
        index.validate();
        embedding.validate();
        if (llm.kind == LlmKind::mock && llm.mock_script.empty()) throw ConfigError("llm.mock_script is required");
        if (download) download->validate();
        if (rate_budget.tokens_per_minute == 0 || rate_budget.requests_in_flight_max == 0)
            throw ConfigError("rate_budget limits must be positive");
    }
};

namespace detail {

inline void only_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> keys) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    std::set<std::string> allowed(keys.begin(), keys.end());
    for (const auto& [k, _] : j.items())
        if (!allowed.count(k)) throw ConfigError("unknown key " + where + "." + k);
}

/// `${NAME}` is replaced by the environment variable NAME (empty if unset).
inline std::string expand_env(const std::string& s) {
    std::string out;
    std::size_t i = 0;
    while (i < s.size()) {
        auto open = s.find("${", i);
        if (open == std::string::npos) break;
        auto close = s.find('}', open);
        if (close == std::string::npos) break;
        out += s.substr(i, open - i);
        out += env_or(s.substr(open + 2, close - open - 2).c_str());
        i = close + 1;
    }
    return out + s.substr(i);
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_relative() ? (base / path).lexically_normal() : path;
}

inline llm::ModelHandle model(const nlohmann::json& j, const std::string& where) {
    if (j.is_string()) return {j.get<std::string>(), 128000};
    only_keys(j, where, {"model_id", "context_limit"});
    return {j.at("model_id").get<std::string>(), j.value("context_limit", std::uint64_t{128000})};
}

inline RetryPolicy retry(const nlohmann::json& j, RetryPolicy r) {
    r.max_retries = j.value("max_retries", r.max_retries);
    r.base_delay = std::chrono::milliseconds(j.value("base_delay_ms", r.base_delay.count()));
    if (r.max_retries < 0) throw ConfigError("max_retries must be non-negative");
    return r;
}

}  // namespace detail

/// Builds a configuration from `j`. Relative paths resolve against `base`.
/// Missing sections keep their defaults; unknown keys are errors.
inline AppConfig from_json(const nlohmann::json& j, const fs::path& base = fs::current_path()) {
    using detail::only_keys;
    AppConfig c;
    try {
        only_keys(j, "config", {"models", "decompilers", "fusion", "search_k", "prediction_candidates", "index",
                                "embedding", "llm", "rate_budget", "prices", "download", "work_dir"});
        if (j.contains("models")) {
            const auto& m = j["models"];
            only_keys(m, "models", {"summarize", "queries", "predict"});
            if (m.contains("summarize")) c.pipeline.summarize_model = detail::model(m["summarize"], "models.summarize");
            if (m.contains("queries")) c.pipeline.query_model = detail::model(m["queries"], "models.queries");
            if (m.contains("predict")) c.pipeline.predict_model = detail::model(m["predict"], "models.predict");
        }
        if (j.contains("decompilers")) {
            c.pipeline.decompilers.clear();
            for (const auto& d : j["decompilers"]) {
                only_keys(d, "decompilers[]", {"name", "command", "timeout_ms", "role"});
                auto role = d.value("role", "primary");
                if (role != "primary" && role != "fallback") throw ConfigError("decompiler role must be primary or fallback");
                c.pipeline.decompilers.push_back(
                    {d.at("name").get<std::string>(), d.at("command").get<std::string>(),
                     std::chrono::milliseconds(d.value("timeout_ms", std::int64_t{120000})),
                     role == "primary" ? decompile::Role::primary : decompile::Role::fallback});
            }
        }
        if (j.contains("fusion")) {
            const auto& f = j["fusion"];
            only_keys(f, "fusion", {"sim_weight", "bm25_weight", "bm25_k1", "bm25_b", "generic_token_stoplist",
                                    "output_top_n"});
            auto& fc = c.pipeline.fusion;
            fc.sim_weight = f.value("sim_weight", fc.sim_weight);
            fc.bm25_weight = f.value("bm25_weight", fc.bm25_weight);
            fc.bm25_k1 = f.value("bm25_k1", fc.bm25_k1);
            fc.bm25_b = f.value("bm25_b", fc.bm25_b);
            if (f.contains("generic_token_stoplist"))
                fc.generic_token_stoplist = f["generic_token_stoplist"].get<std::set<std::string>>();
            fc.output_top_n = f.value("output_top_n", fc.output_top_n);
        }
        c.pipeline.search_k = j.value("search_k", c.pipeline.search_k);
        c.pipeline.prediction_candidates = j.value("prediction_candidates", c.pipeline.prediction_candidates);
        if (j.contains("index")) {
            const auto& x = j["index"];
            only_keys(x, "index", {"engine", "M", "ef_construction", "ef_search", "seed"});
            c.index.engine = x.value("engine", c.index.engine);
            c.index.hnsw.M = x.value("M", c.index.hnsw.M);
            c.index.hnsw.ef_construction = x.value("ef_construction", c.index.hnsw.ef_construction);
            c.index.hnsw.ef_search = x.value("ef_search", c.index.hnsw.ef_search);
            c.index.hnsw.seed = x.value("seed", c.index.hnsw.seed);
        }
        if (j.contains("embedding")) {
            const auto& e = j["embedding"];
            only_keys(e, "embedding", {"provider", "model_id", "dim", "request_batch_size", "max_retries", "url"});
            if (e.contains("provider")) c.embedding.provider = embed::provider_from_string(e["provider"].get<std::string>());
            c.embedding.model_id = e.value("model_id", c.embedding.model_id);
            c.embedding.dim = e.value("dim", c.embedding.dim);
            c.embedding.request_batch_size = e.value("request_batch_size", c.embedding.request_batch_size);
            c.embedding.max_retries = e.value("max_retries", c.embedding.max_retries);
            if (e.contains("url")) c.embedding_endpoint.url = detail::expand_env(e["url"].get<std::string>());
        }
        if (j.contains("llm")) {
            const auto& l = j["llm"];
            only_keys(l, "llm", {"backend", "mock_script", "url", "max_retries", "base_delay_ms"});
            auto kind = l.value("backend", "remote");
            if (kind == "mock") c.llm.kind = LlmKind::mock;
            else if (kind == "remote") c.llm.kind = LlmKind::remote;
            else throw ConfigError("llm.backend must be remote or mock");
            if (l.contains("mock_script")) c.llm.mock_script = detail::resolve(base, l["mock_script"].get<std::string>());
            if (l.contains("url")) c.llm.endpoint.url = detail::expand_env(l["url"].get<std::string>());
            c.llm.retry = detail::retry(l, c.llm.retry);
        }
        if (j.contains("rate_budget")) {
            const auto& r = j["rate_budget"];
            only_keys(r, "rate_budget", {"tokens_per_minute", "requests_in_flight_max"});
            c.rate_budget.tokens_per_minute = r.value("tokens_per_minute", c.rate_budget.tokens_per_minute);
            c.rate_budget.requests_in_flight_max = r.value("requests_in_flight_max", c.rate_budget.requests_in_flight_max);
        }
        if (j.contains("prices")) {
            c.prices.clear();
            for (const auto& [id, p] : j["prices"].items()) {
                only_keys(p, "prices." + id, {"input_per_m", "output_per_m", "embedding_per_m"});
                c.prices[id] = {p.value("input_per_m", std::uint64_t{0}), p.value("output_per_m", std::uint64_t{0}),
                                p.value("embedding_per_m", std::uint64_t{0})};
            }
        }
        if (j.contains("download")) {
            const auto& d = j["download"];
            only_keys(d, "download", {"url_template", "headers", "requests_per_interval", "interval_ms",
                                      "max_retries", "base_delay_ms"});
            pipeline::FetchConfig f;
            f.url_template = d.at("url_template").get<std::string>();
            if (d.contains("headers"))
                for (const auto& [k, v] : d["headers"].items()) f.headers.emplace(k, detail::expand_env(v.get<std::string>()));
            f.requests_per_interval = d.value("requests_per_interval", f.requests_per_interval);
            f.interval = std::chrono::milliseconds(d.value("interval_ms", f.interval.count()));
            f.retry = detail::retry(d, f.retry);
            c.download = std::move(f);
        }
        if (j.contains("work_dir")) c.work_dir = detail::resolve(base, j["work_dir"].get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid configuration: ") + e.what());
    }
    c.validate();
    return c;
}

inline AppConfig load(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return from_json(j, fs::absolute(path).parent_path());
}

}  // namespace malcve::config
