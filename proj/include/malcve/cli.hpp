// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <iostream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "malcve/config.hpp"
#include "malcve/cve_kb.hpp"
#include "malcve/deobfuscator.hpp"
#include "malcve/embeddings.hpp"
#include "malcve/embeddings_remote.hpp"
#include "malcve/errors.hpp"
#include "malcve/eval.hpp"
#include "malcve/index_io.hpp"
#include "malcve/llm/backend.hpp"
#include "malcve/llm/prompts.hpp"
#include "malcve/llm/rate_budget.hpp"
#include "malcve/nvd_client.hpp"
#include "malcve/pipeline/batch.hpp"
#include "malcve/util/clock.hpp"
#include "malcve/util/httplib_client.hpp"
#include "malcve/util/unified_diff.hpp"

namespace malcve::cli {

using OrderedJson = nlohmann::ordered_json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Long-lived objects shared by one command invocation.
struct Runtime {
    std::ostream& out;
    std::ostream& err;
    bool json = false;
    std::unique_ptr<Clock> clock;
    HttplibClient http;
    std::optional<llm::RateBudget> budget;

    Runtime(std::ostream& o, std::ostream& e) : out(o), err(e) {}

    void init_budget(const llm::RateBudgetConfig& cfg) {
        if (!budget) budget.emplace(cfg, *clock);
    }
};

inline std::unique_ptr<embed::EmbeddingProvider> make_embedder(const config::AppConfig& cfg, Runtime& rt) {
    if (cfg.embedding.provider == embed::Provider::local_deterministic)
        return std::make_unique<embed::HashedBagEmbedder>(cfg.embedding.dim, cfg.embedding.model_id);
    rt.init_budget(cfg.rate_budget);
    return std::make_unique<embed::RemoteEmbedder>(cfg.embedding, cfg.embedding_endpoint, rt.http, *rt.clock,
                                                   &*rt.budget);
}

inline std::unique_ptr<llm::ChatBackend> make_chat_backend(const config::AppConfig& cfg, Runtime& rt) {
    if (cfg.llm.kind == config::LlmKind::mock)
        return std::make_unique<llm::MockBackend>(llm::MockBackend::from_file(cfg.llm.mock_script));
    rt.init_budget(cfg.rate_budget);
    return std::make_unique<llm::RemoteChatBackend>(cfg.llm.endpoint, rt.http, *rt.clock, &*rt.budget, cfg.llm.retry);
}

inline fs::path index_dir(const fs::path& kb_dir) { return kb_dir / "index"; }

inline bool is_url(const std::string& s) { return s.starts_with("http://") || s.starts_with("https://"); }

// ---------------------------------------------------------------------------
// ingest

struct IngestArgs {
    std::vector<std::string> feeds;
    fs::path kb_dir;
    std::optional<fs::path> config_path;
    std::optional<std::string> embedder;
    bool refresh = false;
    std::string since;
    std::string nvd_url;
};

inline int cmd_ingest(const IngestArgs& a, Runtime& rt) {
    auto cfg = a.config_path ? config::load(*a.config_path) : config::AppConfig{};
    if (a.embedder) cfg.embedding.provider = embed::provider_from_string(*a.embedder);
    if (a.refresh && !a.feeds.empty()) throw ConfigError("--refresh takes no --feed");
    if (!a.refresh && a.feeds.empty()) throw ConfigError("--feed is required unless --refresh is given");
    std::optional<TimePoint> since;
    if (a.refresh) {
        since = parse_utc(a.since);
        if (!since) throw ConfigError("--since needs an ISO-8601 UTC timestamp, got '" + a.since + "'");
    }
    auto embedder = make_embedder(cfg, rt);
    const bool exists = fs::exists(a.kb_dir / "manifest.json");
    if (a.refresh && !exists) throw ConfigError("no knowledge base at " + a.kb_dir.string() + " to refresh");
    auto kb = exists ? kb::KnowledgeBase::load(a.kb_dir) : kb::KnowledgeBase(embedder->dim(), embedder->model_id());

    kb::IngestStats total;
    if (a.refresh) {
        kb::NvdClientConfig nc;
        if (!a.nvd_url.empty()) nc.base_url = a.nvd_url;
        kb::HttpNvdClient client(nc, rt.http, *rt.clock);
        total = kb.refresh(*since, client, *embedder, *rt.clock);
    } else {
        for (const auto& feed : a.feeds) {
            std::string body;
            if (is_url(feed)) {
                auto resp = rt.http.get(feed, {});
                if (!resp.ok()) throw RefreshError("feed download failed: " + resp.describe());
                body = std::move(resp.body);
            } else {
                body = read_file(feed);
            }
            nlohmann::json doc;
            try {
                doc = nlohmann::json::parse(body);
            } catch (const nlohmann::json::exception& e) {
                throw ParseError(feed + ": " + e.what());
            }
            auto s = kb.ingest_feed(doc, *embedder);
            total.inserted += s.inserted;
            total.updated += s.updated;
            total.skipped += s.skipped;
            total.notes.insert(total.notes.end(), s.notes.begin(), s.notes.end());
        }
    }
    auto snap = kb.snapshot();
    kb.save(a.kb_dir);
    auto idx = index::build_index(cfg.index, index::VectorStore::from_snapshot(snap));
    index::save_index(*idx, index_dir(a.kb_dir));

    if (rt.json) {
        OrderedJson notes = OrderedJson::array();
        for (const auto& n : total.notes) notes.push_back({{"cve_id", n.cve_id}, {"reason", n.reason}});
        rt.out << OrderedJson{{"inserted", total.inserted},
                              {"updated", total.updated},
                              {"skipped", total.skipped},
                              {"records", snap->size()},
                              {"index_engine", cfg.index.engine},
                              {"notes", std::move(notes)}}
                      .dump(2)
               << "\n";
    } else {
        rt.out << "inserted: " << total.inserted << "\n"
               << "updated:  " << total.updated << "\n"
               << "skipped:  " << total.skipped << "\n"
               << "records:  " << snap->size() << "\n"
               << "index:    " << cfg.index.engine << "\n";
        for (const auto& n : total.notes) rt.out << "  skipped " << n.cve_id << ": " << n.reason << "\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
    std::string input;
    fs::path kb_dir;
    std::optional<fs::path> config_path;
    std::size_t workers = 1;
    fs::path out_dir;
    std::optional<fs::path> journal;
};

inline std::vector<std::string> analyze_entries(const std::string& input) {
    fs::path p(input);
    if (pipeline::looks_like_sha256(input) && !fs::exists(p)) return {text::to_lower(input)};
    if (!fs::exists(p)) throw ConfigError("input not found: " + input);
    auto ext = text::to_lower(p.extension().string());
    if (ext == ".jar" || ext == ".zip") return {p.string()};
    return pipeline::read_manifest(p);
}

inline int cmd_analyze(const AnalyzeArgs& a, Runtime& rt) {
    auto cfg = a.config_path ? config::load(*a.config_path) : config::AppConfig{};
    if (a.workers == 0) throw ConfigError("--workers must be at least 1");
    if (!fs::exists(a.kb_dir / "manifest.json")) throw ConfigError("no knowledge base at " + a.kb_dir.string());
    if (!fs::exists(index_dir(a.kb_dir) / "index.meta.json"))
        throw ConfigError("knowledge base at " + a.kb_dir.string() + " has no index; run ingest first");
    auto entries = analyze_entries(a.input);

    auto kb = kb::KnowledgeBase::load(a.kb_dir);
    auto snap = kb.snapshot();
    auto idx = index::load_index(index_dir(a.kb_dir), snap);
    auto embedder = make_embedder(cfg, rt);
    auto backend = make_chat_backend(cfg, rt);
    auto prompts = llm::PromptSet::load();
    fs::create_directories(cfg.work_dir);
    pipeline::PipelineContext ctx{cfg.pipeline, snap,  *idx,       *embedder, *backend, prompts,
                                  cfg.prices,   *rt.clock, cfg.work_dir};

    std::optional<pipeline::Fetcher> fetcher;
    if (cfg.download) fetcher.emplace(*cfg.download, rt.http, *rt.clock);
    pipeline::BatchOptions opts;
    opts.out_dir = a.out_dir;
    opts.worker_count = a.workers;
    opts.journal_path = a.journal;
    opts.fetcher = fetcher ? &*fetcher : nullptr;
    auto summary = pipeline::run_batch(entries, ctx, opts);

    if (rt.json) {
        rt.out << summary.to_json().dump(2) << "\n";
    } else {
        for (const auto& f : summary.files) {
            std::string state(pipeline::to_string(f.state));
            state.resize(8, ' ');
            rt.out << state << " " << f.sha256 << "  cost " << llm::CostLedger::format_scaled(f.cost_scaled) << "  "
                   << f.input_name;
            if (f.failure_stage) rt.out << "  (stage: " << *f.failure_stage << ")";
            if (f.resumed) rt.out << "  (resumed)";
            rt.out << "\n";
        }
        rt.out << "files: " << summary.total() << "  done: " << summary.done << "  failed: " << summary.failed
               << "  excluded: " << summary.excluded << "\n"
               << "total cost: " << summary.total_cost() << "\n";
    }
    return summary.failed > 0 ? kExitRuntime : kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::vector<fs::path> reports;
    fs::path truth;
    std::string ks = "1,3,5,10";
    std::optional<fs::path> out_dir;
};

inline int cmd_eval(const EvalArgs& a, Runtime& rt) {
    auto ks = eval::parse_ks(a.ks);
    auto truth = eval::load_truth_csv(a.truth);
    std::vector<eval::RunMetrics> runs;
    for (const auto& dir : a.reports) runs.push_back(eval::compute_metrics(eval::load_reports(dir), truth, ks));
    auto table = eval::emit_table(runs);
    OrderedJson runs_json = OrderedJson::array();
    for (const auto& r : runs) runs_json.push_back(r.to_json());
    OrderedJson doc{{"runs", std::move(runs_json)}, {"table", table.to_json()}};
    auto out_dir = a.out_dir ? *a.out_dir : a.reports.front();
    fs::create_directories(out_dir);
    write_file_atomic(out_dir / "metrics.json", doc.dump(2) + "\n");
    if (rt.json) rt.out << doc.dump(2) << "\n";
    else rt.out << table.render_text();
    return kExitOk;
}

// ---------------------------------------------------------------------------
// deobfuscate

struct DeobfuscateArgs {
    fs::path root;
    bool dry_run = false;
};

inline int cmd_deobfuscate(const DeobfuscateArgs& a, Runtime& rt) {
    std::vector<fs::path> files;
    fs::path base = a.root;
    if (fs::is_regular_file(a.root)) {
        files.push_back(a.root);
        base = a.root.parent_path();
    } else if (fs::is_directory(a.root)) {
        for (const auto& e : fs::recursive_directory_iterator(a.root))
            if (e.is_regular_file() && e.path().extension() == ".java") files.push_back(e.path());
        std::sort(files.begin(), files.end());
    } else {
        throw ConfigError("not a file or directory: " + a.root.string());
    }
    std::vector<deobf::SourceUnit> units;
    for (const auto& f : files) units.push_back({f.lexically_relative(base).generic_string(), read_file(f)});
    auto [folded, report] = deobf::fold_tree(units);

    std::string diff;
    std::size_t changed = 0;
    for (std::size_t i = 0; i < units.size(); ++i) {
        if (folded[i].text == units[i].text) continue;
        ++changed;
        if (a.dry_run) diff += unified_diff(units[i].text, folded[i].text, units[i].path);
        else write_file_atomic(files[i], folded[i].text);
    }
    if (rt.json) {
        OrderedJson failed = OrderedJson::array();
        for (const auto& f : report.failed_files) failed.push_back({{"path", f.path}, {"reason", f.reason}});
        OrderedJson doc{{"files", units.size()},
                        {"changed", changed},
                        {"total_folds", report.total_folds},
                        {"dry_run", a.dry_run},
                        {"failed_files", std::move(failed)}};
        if (a.dry_run) doc["diff"] = diff;
        rt.out << doc.dump(2) << "\n";
    } else {
        rt.out << diff;
        auto& summary_out = a.dry_run ? rt.err : rt.out;
        summary_out << "files: " << units.size() << "  changed: " << changed << "  folds: " << report.total_folds
                    << "  failed: " << report.failed_files.size() << "\n";
        for (const auto& f : report.failed_files) summary_out << "  left unchanged " << f.path << ": " << f.reason << "\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------

/// Entry point shared by the binary and the tests.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Maps malicious Java archives to the CVEs they exploit."};
    app.name("malcve");
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);
    app.set_version_flag("--version", std::string(MALCVE_VERSION));

    bool json = false;
    std::string clock_at;
    app.add_flag("--json", json, "Machine-readable output");
    app.add_option("--clock", clock_at, "Fix the clock at an ISO-8601 UTC instant (reproducible runs)");

    auto feed_check = [](const std::string& s) -> std::string {
        if (is_url(s) || fs::is_regular_file(s)) return {};
        return "feed not found: " + s;
    };

    IngestArgs ia;
    auto* ingest = app.add_subcommand("ingest", "Build or update the CVE knowledge base and its index");
    ingest->add_option("--feed", ia.feeds, "NVD API 2.0 JSON document (path or URL); repeatable")->check(feed_check);
    ingest->add_option("--kb", ia.kb_dir, "Knowledge base directory")->required();
    ingest->add_option("--config", ia.config_path, "JSON configuration file")->check(CLI::ExistingFile);
    ingest->add_option("--embedder", ia.embedder, "Embedding provider")->check(CLI::IsMember({"remote", "local"}));
    ingest->add_flag("--refresh", ia.refresh, "Fetch records modified since --since from the NVD API");
    ingest->add_option("--since", ia.since, "Start of the refresh window (ISO-8601 UTC)");
    ingest->add_option("--nvd-url", ia.nvd_url, "Override the NVD API base URL");

    AnalyzeArgs aa;
    auto* analyze = app.add_subcommand("analyze", "Analyze a JAR or a manifest of JARs and hashes");
    analyze->add_option("input", aa.input, "JAR file, manifest file or sha256")->required();
    analyze->add_option("--kb", aa.kb_dir, "Knowledge base directory")->required();
    analyze->add_option("--config", aa.config_path, "JSON configuration file")->check(CLI::ExistingFile);
    analyze->add_option("--workers", aa.workers, "Analysis worker threads")->check(CLI::PositiveNumber);
    analyze->add_option("--out", aa.out_dir, "Report directory")->required();
    analyze->add_option("--journal", aa.journal, "Journal file for resuming interrupted runs");

    EvalArgs ea;
    auto* evalc = app.add_subcommand("eval", "Score reports against ground truth");
    evalc->add_option("--reports", ea.reports, "Report directory of one run; repeatable")->required();
    evalc->add_option("--truth", ea.truth, "Ground-truth CSV (sha256,is_malicious,cve_list)")->required();
    evalc->add_option("--k", ea.ks, "Comma-separated cutoffs from {1,3,5,10}");
    evalc->add_option("--out", ea.out_dir, "Where to write metrics.json (default: first report directory)");

    DeobfuscateArgs da;
    auto* deob = app.add_subcommand("deobfuscate", "Fold constant string expressions in Java sources");
    deob->add_option("path", da.root, "Source directory or single .java file")->required();
    deob->add_flag("--dry-run", da.dry_run, "Print a unified diff instead of rewriting files");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    Runtime rt(out, err);
    rt.json = json;
    try {
        if (clock_at.empty()) {
            rt.clock = std::make_unique<SystemClock>();
        } else {
            auto t = parse_utc(clock_at);
            if (!t) throw ConfigError("--clock needs an ISO-8601 UTC timestamp, got '" + clock_at + "'");
            rt.clock = std::make_unique<FixedClock>(*t);
        }
        if (ingest->parsed()) return cmd_ingest(ia, rt);
        if (analyze->parsed()) return cmd_analyze(aa, rt);
        if (evalc->parsed()) return cmd_eval(ea, rt);
        return cmd_deobfuscate(da, rt);
    } catch (const ConfigError& e) {
        err << "malcve: configuration error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "malcve: " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace malcve::cli
