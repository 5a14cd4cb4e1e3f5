// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "malcve/errors.hpp"
#include "malcve/pipeline/analysis.hpp"
#include "malcve/pipeline/download.hpp"
#include "malcve/pipeline/work.hpp"

namespace malcve::pipeline {

/// One sha256 or path per line; blank lines and `#` comments are skipped.
inline std::vector<std::string> parse_manifest(std::string_view content) {
    std::vector<std::string> out;
    for (const auto& line : text::split_lines(content)) {
        auto s = text::trim(line);
        if (s.empty() || s.front() == '#') continue;
        out.emplace_back(s);
    }
    return out;
}

/// Relative paths are taken from the manifest's directory.
inline std::vector<std::string> read_manifest(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("manifest not found: " + path.string());
    auto entries = parse_manifest(read_file(path));
    const auto base = path.parent_path();
    for (auto& e : entries) {
        fs::path p(e);
        if (!p.is_relative()) continue;
        if (text::is_hex_digest(e, 64) && !fs::exists(base / p)) continue;
        e = (base / p).lexically_normal().string();
    }
    return entries;
}

struct BatchOptions {
    fs::path out_dir;
    std::size_t worker_count = 1;
    std::optional<fs::path> journal_path;
    Fetcher* fetcher = nullptr;  ///< required when the manifest lists bare hashes
};

struct FileOutcome {
    std::string key;
    std::string sha256;
    std::string input_name;
    ReportState state = ReportState::done;
    std::optional<std::string> failure_stage;
    std::uint64_t cost_scaled = 0;
    fs::path report;
    bool resumed = false;
};

struct BatchSummary {
    std::size_t done = 0;
    std::size_t failed = 0;
    std::size_t excluded = 0;
    std::uint64_t total_cost_scaled = 0;
    std::vector<FileOutcome> files;  ///< manifest order

    std::size_t total() const { return files.size(); }
    std::string total_cost() const { return llm::CostLedger::format_scaled(total_cost_scaled); }

    OrderedJson to_json() const {
        OrderedJson fs_ = OrderedJson::array();
        for (const auto& f : files)
            fs_.push_back({{"key", f.key},
                           {"sha256", f.sha256},
                           {"input_name", f.input_name},
                           {"state", std::string(to_string(f.state))},
                           {"failure_stage", f.failure_stage ? OrderedJson(*f.failure_stage) : OrderedJson(nullptr)},
                           {"cost", llm::CostLedger::format_scaled(f.cost_scaled)},
                           {"report", f.report.string()},
                           {"resumed", f.resumed}});
        return {{"total", total()},
                {"done", done},
                {"failed", failed},
                {"excluded", excluded},
                {"total_cost", total_cost()},
                {"files", std::move(fs_)}};
    }
};

inline bool looks_like_sha256(std::string_view s) { return text::is_hex_digest(s, 64); }

namespace detail {

inline ReportState state_from(std::string_view s) {
    if (s == "done") return ReportState::done;
    if (s == "excluded") return ReportState::excluded;
    return ReportState::failed;
}

/// Rebuilds the outcome of an item finished by an earlier run from its report.
inline std::optional<FileOutcome> outcome_from_report(const std::string& key, const std::string& sha,
                                                      const fs::path& out_dir) {
    auto p = report_path(out_dir, sha);
    if (sha.empty() || !fs::exists(p)) return std::nullopt;
    try {
        auto j = nlohmann::json::parse(read_file(p));
        FileOutcome o;
        o.key = key;
        o.sha256 = sha;
        o.input_name = j.at("input_name").get<std::string>();
        o.state = state_from(j.at("state").get<std::string>());
        if (j.at("failure").is_object()) o.failure_stage = j["failure"].at("stage").get<std::string>();
        o.cost_scaled = j.at("metadata").at("cost").at("total_scaled_1e-12").get<std::uint64_t>();
        o.report = p;
        o.resumed = true;
        return o;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

}  // namespace detail

/// Drives every manifest entry to a terminal state with one download worker
/// and `worker_count` analysis workers, writing one report per entry. Items
/// the journal marks terminal, and whose report exists, are not redone.
inline BatchSummary run_batch(const std::vector<std::string>& entries, const PipelineContext& ctx,
                              const BatchOptions& opts) {
    if (opts.worker_count == 0) throw ConfigError("worker_count must be at least 1");
    ctx.check();
    fs::create_directories(opts.out_dir);
    std::optional<Journal> journal;
    if (opts.journal_path) journal.emplace(*opts.journal_path);
    Journal* jp = journal ? &*journal : nullptr;

    std::vector<std::optional<FileOutcome>> outcomes(entries.size());
    std::mutex mu;
    auto finish = [&](const WorkItem& item, const AnalysisReport& rep) {
        FileOutcome o;
        o.key = item.key;
        o.sha256 = rep.file_sha256;
        o.input_name = rep.input_name;
        o.state = rep.state;
        if (rep.failure) o.failure_stage = rep.failure->stage;
        o.cost_scaled = rep.cost.total_scaled();
        o.report = write_report(rep, opts.out_dir);
        if (jp) jp->record(item);
        std::lock_guard lock(mu);
        outcomes[item.order] = std::move(o);
    };

    BlockingQueue<WorkItem> downloads;
    BlockingQueue<WorkItem> analysis;
    bool any_download = false;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& key = entries[i];
        if (jp) {
            if (auto prev = jp->last(key); prev && is_terminal(prev->state)) {
                if (auto o = detail::outcome_from_report(key, prev->sha256, opts.out_dir)) {
                    outcomes[i] = std::move(*o);
                    continue;
                }
            }
        }
        WorkItem item;
        item.key = key;
        item.order = i;
        std::error_code ec;
        if (looks_like_sha256(key) && !fs::exists(key, ec)) {
            if (!opts.fetcher) throw ConfigError("manifest lists hash " + key + " but no download source is configured");
            item.sha256 = text::to_lower(key);
            item.state = WorkState::queued_download;
            if (jp) jp->record(item);
            downloads.push(std::move(item));
            any_download = true;
            continue;
        }
        item.path = fs::path(key);
        item.state = WorkState::queued_analysis;
        if (!fs::is_regular_file(*item.path, ec)) {
            item.sha256 = sha256_hex("unreadable:" + key);
            item.move_to(WorkState::failed);
            finish(item, failed_report(item.sha256, key, "input", "input is not a readable file: " + key, ctx));
            continue;
        }
        item.sha256 = sha256_file(*item.path);
        if (jp) jp->record(item);
        analysis.push(std::move(item));
    }
    downloads.close();

    std::optional<TempDir> download_dir;
    std::thread downloader;
    if (any_download) {
        download_dir.emplace(ctx.work_dir, "downloads");
        downloader = std::thread([&] {
            download_worker(downloads, analysis, *opts.fetcher, download_dir->path(), jp,
                            [&](WorkItem item, std::string why) {
                                finish(item, failed_report(item.sha256, item.sha256, "download", std::move(why), ctx));
                            });
            analysis.close();
        });
    } else {
        analysis.close();
    }

    auto worker = [&] {
        while (auto item = analysis.pop()) {
            item->move_to(WorkState::analyzing);
            if (jp) jp->record(*item);
            AnalysisReport rep;
            try {
                rep = run_analysis(*item->path, ctx);
                if (!item->sha256.empty() && rep.file_sha256 != item->sha256)
                    throw PreconditionError("input changed while queued: " + item->key);
            } catch (const std::exception& e) {
                rep = failed_report(item->sha256, item->path->filename().string(), "analysis", e.what(), ctx);
            }
            item->move_to(rep.state == ReportState::done       ? WorkState::done
                          : rep.state == ReportState::excluded ? WorkState::excluded
                                                               : WorkState::failed);
            finish(*item, rep);
            if (download_dir) {
                std::error_code ec;
                if (item->path->parent_path() == download_dir->path()) fs::remove(*item->path, ec);
            }
        }
    };
    std::vector<std::thread> workers;
    for (std::size_t i = 0; i < opts.worker_count; ++i) workers.emplace_back(worker);
    for (auto& t : workers) t.join();
    if (downloader.joinable()) downloader.join();

    BatchSummary s;
    for (auto& o : outcomes) {
        if (!o) throw Error("batch finished with an item in no terminal state");
        switch (o->state) {
            case ReportState::done: ++s.done; break;
            case ReportState::failed: ++s.failed; break;
            case ReportState::excluded: ++s.excluded; break;
        }
        s.total_cost_scaled += o->cost_scaled;
        s.files.push_back(std::move(*o));
    }
    return s;
}

}  // namespace malcve::pipeline
