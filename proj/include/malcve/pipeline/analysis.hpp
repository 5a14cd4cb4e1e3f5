// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

#include "malcve/cve_kb.hpp"
#include "malcve/decompile.hpp"
#include "malcve/deobfuscator.hpp"
#include "malcve/embeddings.hpp"
#include "malcve/errors.hpp"
#include "malcve/llm/client.hpp"
#include "malcve/rerank.hpp"
#include "malcve/util/clock.hpp"
#include "malcve/util/files.hpp"
#include "malcve/util/sha256.hpp"
#include "malcve/vector_index.hpp"

#ifndef MALCVE_VERSION
#define MALCVE_VERSION "0.0.0"
#endif

namespace malcve::pipeline {

using OrderedJson = nlohmann::ordered_json;

inline constexpr std::string_view kPipelineVersion = MALCVE_VERSION;

struct PipelineConfig {
    llm::ModelHandle summarize_model{"gpt-4o-mini", 128000};
    llm::ModelHandle query_model{"gpt-4o-mini", 128000};
    llm::ModelHandle predict_model{"gpt-4o-mini", 128000};
    std::vector<decompile::DecompilerSpec> decompilers = decompile::default_specs();
    rerank::FusionConfig fusion{};
    std::size_t search_k = 100;
    std::size_t prediction_candidates = 10;

    void validate() const {
        fusion.validate();
        decompile::ordered(decompilers);
        if (search_k == 0) throw ConfigError("search_k must be positive");
        if (prediction_candidates == 0 || prediction_candidates > llm::kMaxCandidates)
            throw ConfigError("prediction_candidates must lie in [1, " + std::to_string(llm::kMaxCandidates) + "]");
        for (const auto* m : {&summarize_model, &query_model, &predict_model}) {
            if (m->model_id.empty()) throw ConfigError("model id must not be empty");
            if (m->context_limit == 0) throw ConfigError("context_limit must be positive for " + m->model_id);
        }
    }

    /// Snapshot embedded in every report.
    OrderedJson to_json() const {
        auto model = [](const llm::ModelHandle& m) {
            return OrderedJson{{"model_id", m.model_id}, {"context_limit", m.context_limit}};
        };
        OrderedJson decs = OrderedJson::array();
        for (const auto& d : decompilers)
            decs.push_back({{"name", d.name},
                            {"command", d.command_template},
                            {"timeout_ms", d.timeout.count()},
                            {"role", d.role == decompile::Role::primary ? "primary" : "fallback"}});
        return {{"models", {{"summarize", model(summarize_model)},
                            {"queries", model(query_model)},
                            {"predict", model(predict_model)}}},
                {"decompilers", std::move(decs)},
                {"fusion", {{"sim_weight", fusion.sim_weight},
                            {"bm25_weight", fusion.bm25_weight},
                            {"bm25_k1", fusion.bm25_k1},
                            {"bm25_b", fusion.bm25_b},
                            {"bm25_statistics", "candidate_pool"},
                            {"generic_token_stoplist", fusion.generic_token_stoplist},
                            {"output_top_n", fusion.output_top_n}}},
                {"search_k", search_k},
                {"prediction_candidates", prediction_candidates}};
    }
};

/// Everything one analysis needs. Shared read-only across workers; the
/// embedder and chat backend are thread-safe.
struct PipelineContext {
    const PipelineConfig& config;
    kb::SnapshotPtr kb;
    const index::VectorIndex& index;
    embed::EmbeddingProvider& embedder;
    llm::ChatBackend& llm;
    const llm::PromptSet& prompts;
    llm::PriceTable prices;
    Clock& clock;
    fs::path work_dir;

    /// Rejects mismatched components before any file is processed.
    void check() const {
        config.validate();
        if (!kb) throw ConfigError("no knowledge base loaded");
        const auto& m = kb->manifest();
        if (m.embedding_model_id != embedder.model_id())
            throw ConfigError("knowledge base was embedded with " + m.embedding_model_id + " but the embedder is " +
                              embedder.model_id());
        if (m.embedding_dim != embedder.dim() || index.dim() != embedder.dim())
            throw ConfigError("embedding dimension differs between knowledge base, index and embedder");
        if (index.size() != kb->size()) throw ConfigError("index and knowledge base sizes differ");
        for (const auto& id : {config.summarize_model.model_id, config.query_model.model_id,
                               config.predict_model.model_id, embedder.model_id()})
            if (!prices.count(id)) throw ConfigError("no price configured for model " + id);
    }
};

enum class ReportState { done, failed, excluded };

inline std::string_view to_string(ReportState s) {
    switch (s) {
        case ReportState::done: return "done";
        case ReportState::failed: return "failed";
        case ReportState::excluded: return "excluded";
    }
    return "?";
}

struct StageFailure {
    std::string stage;
    std::string error;
};

struct DeobfuscationSummary {
    std::size_t files = 0;
    deobf::FoldReport fold;
};

struct AnalysisReport {
    std::string file_sha256;
    std::string input_name;
    ReportState state = ReportState::done;
    std::optional<StageFailure> failure;
    std::optional<decompile::DecompileResult> decompile;
    std::optional<DeobfuscationSummary> deobfuscation;
    std::optional<llm::CodeSummary> code_summary;
    std::vector<std::string> search_queries;
    std::vector<rerank::RankedCve> candidates;
    std::optional<llm::CvePrediction> prediction;
    OrderedJson metadata = OrderedJson::object();
    llm::CostLedger cost;

    OrderedJson to_json() const {
        OrderedJson j;
        j["file_sha256"] = file_sha256;
        j["input_name"] = input_name;
        j["state"] = std::string(to_string(state));
        j["failure"] = failure ? OrderedJson{{"stage", failure->stage}, {"error", failure->error}} : OrderedJson(nullptr);
        if (decompile) {
            OrderedJson attempts = OrderedJson::array();
            for (const auto& a : decompile->attempts)
                attempts.push_back({{"tool", a.tool},
                                    {"exit_code", a.exit_code},
                                    {"timed_out", a.timed_out},
                                    {"java_files", a.java_files},
                                    {"succeeded", a.succeeded}});
            j["decompile"] = {{"status", std::string(decompile::to_string(decompile->status))},
                              {"tool_used", decompile->tool_used ? OrderedJson(*decompile->tool_used) : OrderedJson(nullptr)},
                              {"attempts", std::move(attempts)},
                              {"diagnostics", decompile->diagnostics}};
        } else {
            j["decompile"] = nullptr;
        }
        if (deobfuscation) {
            OrderedJson failed = OrderedJson::array();
            for (const auto& f : deobfuscation->fold.failed_files) failed.push_back({{"path", f.path}, {"reason", f.reason}});
            j["deobfuscation"] = {{"files", deobfuscation->files},
                                  {"total_folds", deobfuscation->fold.total_folds},
                                  {"failed_files", std::move(failed)}};
        } else {
            j["deobfuscation"] = nullptr;
        }
        j["code_summary"] = code_summary ? llm::to_json(*code_summary) : OrderedJson(nullptr);
        j["search_queries"] = search_queries;
        OrderedJson cands = OrderedJson::array();
        for (const auto& c : candidates)
            cands.push_back({{"cve_id", c.cve_id},
                             {"source", std::string(rerank::to_string(c.source))},
                             {"sim_score", c.sim_score},
                             {"bm25_score", c.bm25_score},
                             {"norm_sim", c.norm_sim},
                             {"norm_bm25", c.norm_bm25},
                             {"final_score", c.final_score}});
        j["candidates"] = std::move(cands);
        j["prediction"] = prediction ? llm::to_json(*prediction) : OrderedJson(nullptr);
        j["metadata"] = metadata;
        return j;
    }

    std::string serialize() const { return to_json().dump(2) + "\n"; }
};

inline fs::path report_path(const fs::path& out_dir, std::string_view sha256) {
    return out_dir / (std::string(sha256) + ".report.json");
}

inline fs::path write_report(const AnalysisReport& r, const fs::path& out_dir) {
    auto p = report_path(out_dir, r.file_sha256);
    fs::create_directories(out_dir);
    write_file_atomic(p, r.serialize());
    return p;
}

namespace detail {

inline std::vector<std::string> code_blocks(const std::vector<deobf::SourceUnit>& units) {
    std::vector<std::string> out;
    out.reserve(units.size());
    for (const auto& u : units) out.push_back("// " + u.path + "\n" + u.text);
    return out;
}

inline void fill_metadata(AnalysisReport& r, const PipelineContext& ctx, TimePoint started,
                          const llm::Transcript& transcript) {
    const auto& cfg = ctx.config;
    const auto& kbm = ctx.kb->manifest();
    r.metadata = {{"pipeline_version", std::string(kPipelineVersion)},
                  {"models", {{"summarize", cfg.summarize_model.model_id},
                              {"queries", cfg.query_model.model_id},
                              {"predict", cfg.predict_model.model_id},
                              {"embedding", ctx.embedder.model_id()}}},
                  {"prompts", {{"summarize", ctx.prompts.summarize.sha256},
                               {"queries", ctx.prompts.queries.sha256},
                               {"predict", ctx.prompts.predict.sha256}}},
                  {"config", cfg.to_json()},
                  {"knowledge_base", kbm.to_json()},
                  {"index_engine", std::string(ctx.index.engine())},
                  {"timestamps", {{"started", format_utc(started)}, {"finished", format_utc(ctx.clock.now())}}},
                  {"cost", r.cost.to_json()},
                  {"llm_exchanges", transcript.to_json()}};
}

}  // namespace detail

/// Runs one JAR through decompilation, folding, summarization, query
/// generation, retrieval, fusion, CWE expansion and, unless the verdict is
/// Benign, prediction. Stage failures are recorded in the report rather than
/// thrown; configuration problems and unreadable input throw.
inline AnalysisReport run_analysis(const fs::path& jar_path, const PipelineContext& ctx) {
    std::error_code ec;
    if (!fs::is_regular_file(jar_path, ec)) throw PreconditionError("input is not a readable file: " + jar_path.string());
    const auto& cfg = ctx.config;
    const TimePoint started = ctx.clock.now();

    AnalysisReport r;
    r.cost = llm::CostLedger(ctx.prices);
    r.file_sha256 = sha256_file(jar_path);
    r.input_name = jar_path.filename().string();
    llm::Transcript transcript;
    llm::LlmClient client(ctx.llm, ctx.prompts, &r.cost);

    auto finish = [&]() -> AnalysisReport {
        detail::fill_metadata(r, ctx, started, transcript);
        return std::move(r);
    };
    auto fail = [&](std::string stage, const std::exception& e) -> AnalysisReport {
        r.state = ReportState::failed;
        r.failure = StageFailure{std::move(stage), e.what()};
        return finish();
    };

    auto dec = decompile::decompile(jar_path, cfg.decompilers, ctx.work_dir);
    r.decompile = dec;
    r.decompile->workspace.reset();
    if (dec.status != decompile::Status::ok) {
        r.state = ReportState::excluded;
        return finish();
    }

    std::vector<deobf::SourceUnit> units;
    try {
        auto [folded, report] = deobf::fold_tree(decompile::load_sources(dec));
        r.deobfuscation = DeobfuscationSummary{folded.size(), std::move(report)};
        units = std::move(folded);
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        return fail("deobfuscate", e);
    }
    dec = {};  // sources are in memory now; drop the decompiler output
    const auto code = detail::code_blocks(units);

    try {
        r.code_summary = client.summarize_code(cfg.summarize_model, code, transcript);
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        return fail("summarize", e);
    }
    if (r.code_summary->verdict.label == llm::Label::Benign) return finish();

    try {
        r.search_queries = client.generate_queries(cfg.query_model, *r.code_summary, transcript);
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        return fail("queries", e);
    }

    try {
        std::vector<std::vector<index::SearchHit>> per_query;
        if (!r.search_queries.empty()) {
            embed::EmbedUsage usage;
            auto vecs = ctx.embedder.embed_batch(r.search_queries, &usage);
            r.cost.charge_embedding(ctx.embedder.model_id(), usage.tokens);
            for (std::size_t i = 0; i < vecs.size(); ++i) per_query.push_back(ctx.index.search(vecs[i], cfg.search_k, i));
        }
        auto hits = index::aggregate_max(per_query);
        auto describe = [&](const std::string& id) -> std::string_view {
            const auto* rec = ctx.kb->find(id);
            return rec ? std::string_view(rec->description) : std::string_view();
        };
        auto fused = rerank::fuse(hits, r.code_summary->libraries_used, describe, cfg.fusion);
        r.candidates = rerank::expand_by_cwe(fused, *ctx.kb, cfg.fusion);
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        return fail("retrieval", e);
    }
    if (r.candidates.empty()) return finish();

    try {
        std::vector<llm::CandidateCve> offered;
        for (const auto& c : rerank::prompt_candidates(r.candidates, cfg.prediction_candidates)) {
            const auto* rec = ctx.kb->find(c.cve_id);
            offered.push_back({c.cve_id, rec ? rec->description : std::string()});
        }
        r.prediction = client.predict_cve(cfg.predict_model, *r.code_summary, offered, llm::render_files(code),
                                          transcript);
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        return fail("predict", e);
    }
    return finish();
}

/// Report for an item that never reached analysis (download failure,
/// unreadable input).
inline AnalysisReport failed_report(std::string sha256, std::string input_name, std::string stage, std::string error,
                                    const PipelineContext& ctx) {
    AnalysisReport r;
    r.cost = llm::CostLedger(ctx.prices);
    r.file_sha256 = std::move(sha256);
    r.input_name = std::move(input_name);
    r.state = ReportState::failed;
    r.failure = StageFailure{std::move(stage), std::move(error)};
    auto now = ctx.clock.now();
    detail::fill_metadata(r, ctx, now, llm::Transcript{});
    return r;
}

}  // namespace malcve::pipeline
