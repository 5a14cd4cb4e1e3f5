// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <atomic>
#include <set>

#include "e2e_support.hpp"
#include "malcve/pipeline/batch.hpp"
#include "test_support.hpp"

using namespace malcve;
using namespace malcve::pipeline;
using namespace std::chrono_literals;
using testing_support::E2eEnv;
using testing_support::planted_samples;
using testing_support::sample_jar;

TEST(WorkItemState, TransitionsFollowTheListedOrder) {
    EXPECT_TRUE(valid_transition(WorkState::queued_download, WorkState::downloaded));
    EXPECT_TRUE(valid_transition(WorkState::downloaded, WorkState::queued_analysis));
    EXPECT_TRUE(valid_transition(WorkState::queued_analysis, WorkState::analyzing));
    EXPECT_TRUE(valid_transition(WorkState::analyzing, WorkState::done));
    EXPECT_TRUE(valid_transition(WorkState::analyzing, WorkState::excluded));
    EXPECT_TRUE(valid_transition(WorkState::queued_download, WorkState::failed));
    EXPECT_FALSE(valid_transition(WorkState::queued_analysis, WorkState::excluded));
    EXPECT_FALSE(valid_transition(WorkState::downloaded, WorkState::done));
    EXPECT_FALSE(valid_transition(WorkState::analyzing, WorkState::queued_analysis));
    EXPECT_FALSE(valid_transition(WorkState::done, WorkState::failed));
    EXPECT_FALSE(valid_transition(WorkState::excluded, WorkState::done));
    WorkItem w;
    w.state = WorkState::queued_download;
    EXPECT_THROW(w.move_to(WorkState::analyzing), PreconditionError);
}

TEST(BlockingQueue, EveryItemIsDeliveredOnce) {
    BlockingQueue<int> q;
    std::atomic<long> sum{0};
    std::atomic<int> count{0};
    std::vector<std::thread> consumers;
    for (int c = 0; c < 4; ++c)
        consumers.emplace_back([&] {
            while (auto v = q.pop()) {
                sum += *v;
                ++count;
            }
        });
    std::vector<std::thread> producers;
    for (int p = 0; p < 3; ++p)
        producers.emplace_back([&, p] {
            for (int i = 1; i <= 1000; ++i) q.push(p * 1000 + i);
        });
    for (auto& t : producers) t.join();
    q.close();
    for (auto& t : consumers) t.join();
    EXPECT_EQ(count, 3000);
    EXPECT_EQ(sum, 3000L * 3001 / 2);
    EXPECT_THROW(q.push(1), PreconditionError);
}

TEST(Journal, ReplaysLastStateAndToleratesTornTail) {
    TempDir tmp(fs::temp_directory_path(), "malcve-journal");
    auto path = tmp.path() / "batch.journal";
    {
        Journal j(path);
        WorkItem a{"a.jar", "aa", std::nullopt, WorkState::queued_analysis, 0, 0};
        j.record(a);
        a.move_to(WorkState::analyzing);
        j.record(a);
        a.move_to(WorkState::done);
        j.record(a);
        WorkItem b{"b.jar", "bb", std::nullopt, WorkState::queued_analysis, 0, 1};
        j.record(b);
    }
    {
        std::ofstream out(path, std::ios::app);
        out << "{\"key\":\"b.jar\",\"sta";
    }
    Journal j(path);
    ASSERT_TRUE(j.last("a.jar"));
    EXPECT_EQ(j.last("a.jar")->state, WorkState::done);
    EXPECT_EQ(j.last("a.jar")->sha256, "aa");
    EXPECT_EQ(j.last("b.jar")->state, WorkState::queued_analysis);
    EXPECT_FALSE(j.last("c.jar"));
    WorkItem c{"c.jar", "cc", std::nullopt, WorkState::queued_analysis, 0, 2};
    j.record(c);
    Journal again(path);
    EXPECT_EQ(again.last("c.jar")->state, WorkState::queued_analysis);
}

TEST(Manifest, SkipsCommentsAndResolvesRelativePaths) {
    EXPECT_EQ(parse_manifest("# c\n\n a.jar \n#x\nb.jar"), (std::vector<std::string>{"a.jar", "b.jar"}));
    auto m = read_manifest(testing_support::e2e_fixture("manifest.txt"));
    ASSERT_EQ(m.size(), 6u);
    EXPECT_EQ(fs::path(m[0]), sample_jar("s1").lexically_normal());
    EXPECT_THROW(read_manifest("/nonexistent/manifest.txt"), ConfigError);
}

// ---------------------------------------------------------------------------
// Download worker

namespace {

std::string payload(int i) { return "sample payload " + std::to_string(i); }

class FakeSamples {
public:
    explicit FakeSamples(int n) {
        for (int i = 0; i < n; ++i) by_hash_[sha256_hex(payload(i))] = payload(i);
        srv_.server().Get(R"(/files/([0-9a-f]+))", [this](const httplib::Request& req, httplib::Response& res) {
            std::lock_guard lock(mu_);
            ++hits_;
            if (req.get_header_value("X-Api-Key") != "secret") {
                res.status = 401;
                return;
            }
            auto h = req.matches[1].str();
            if (fail_.count(h)) {
                res.status = 503;
                return;
            }
            auto it = by_hash_.find(h);
            if (it == by_hash_.end()) {
                res.status = 404;
                return;
            }
            res.set_content(corrupt_.count(h) ? it->second + "!" : it->second, "application/octet-stream");
        });
        srv_.start();
    }

    std::vector<std::string> hashes() const {
        std::vector<std::string> out;
        for (int i = 0; i < static_cast<int>(by_hash_.size()); ++i) out.push_back(sha256_hex(payload(i)));
        return out;
    }

    FetchConfig config(std::uint64_t per_interval = 2) const {
        FetchConfig c;
        c.url_template = srv_.url("/files/{sha256}");
        c.headers.emplace("X-Api-Key", "secret");
        c.requests_per_interval = per_interval;
        c.interval = 1000ms;
        c.retry.max_retries = 2;
        c.retry.base_delay = 100ms;
        return c;
    }

    void corrupt(const std::string& h) { corrupt_.insert(h); }
    void fail(const std::string& h) { fail_.insert(h); }
    int hits() const {
        std::lock_guard lock(mu_);
        return hits_;
    }

private:
    testing_support::LocalServer srv_;
    std::map<std::string, std::string> by_hash_;
    std::set<std::string> corrupt_, fail_;
    mutable std::mutex mu_;
    int hits_ = 0;
};

struct DownloadRun {
    std::vector<WorkItem> queued;
    std::vector<std::pair<WorkItem, std::string>> failed;
};

DownloadRun run_downloads(FakeSamples& fake, Fetcher& fetcher, const fs::path& dest) {
    BlockingQueue<WorkItem> in, out;
    std::size_t order = 0;
    for (const auto& h : fake.hashes()) in.push(WorkItem{h, h, std::nullopt, WorkState::queued_download, 0, order++});
    in.close();
    DownloadRun run;
    download_worker(in, out, fetcher, dest, nullptr,
                    [&](WorkItem w, std::string why) { run.failed.emplace_back(std::move(w), std::move(why)); });
    out.close();
    while (auto w = out.pop()) run.queued.push_back(std::move(*w));
    return run;
}

}  // namespace

TEST(DownloadWorker, RespectsRequestCeiling) {
    FakeSamples fake(5);
    HttplibClient http;
    ManualClock clock;
    Fetcher fetcher(fake.config(2), http, clock);
    TempDir dest(fs::temp_directory_path(), "malcve-dl");
    auto start = clock.now();
    auto run = run_downloads(fake, fetcher, dest.path());
    EXPECT_GE(clock.now() - start, 2s);
    EXPECT_LT(clock.now() - start, 3s);
    EXPECT_EQ(run.queued.size(), 5u);
    EXPECT_TRUE(run.failed.empty());
}

TEST(DownloadWorker, HappyPathQueuesVerifiedPayload) {
    FakeSamples fake(1);
    HttplibClient http;
    ManualClock clock;
    Fetcher fetcher(fake.config(), http, clock);
    TempDir dest(fs::temp_directory_path(), "malcve-dl");
    auto run = run_downloads(fake, fetcher, dest.path());
    ASSERT_EQ(run.queued.size(), 1u);
    const auto& w = run.queued[0];
    EXPECT_EQ(w.state, WorkState::queued_analysis);
    ASSERT_TRUE(w.path);
    EXPECT_EQ(read_file(*w.path), payload(0));
    EXPECT_EQ(sha256_file(*w.path), w.sha256);
}

TEST(DownloadWorker, HashMismatchFailsAndIsNeverQueued) {
    FakeSamples fake(2);
    fake.corrupt(fake.hashes()[1]);
    HttplibClient http;
    ManualClock clock;
    Fetcher fetcher(fake.config(), http, clock);
    TempDir dest(fs::temp_directory_path(), "malcve-dl");
    auto run = run_downloads(fake, fetcher, dest.path());
    ASSERT_EQ(run.queued.size(), 1u);
    ASSERT_EQ(run.failed.size(), 1u);
    EXPECT_EQ(run.failed[0].first.state, WorkState::failed);
    EXPECT_NE(run.failed[0].second.find("hash mismatch"), std::string::npos);
    EXPECT_FALSE(fs::exists(dest.path() / (fake.hashes()[1] + ".jar")));
}

TEST(DownloadWorker, ServerErrorsRetryThenFail) {
    FakeSamples fake(1);
    fake.fail(fake.hashes()[0]);
    HttplibClient http;
    ManualClock clock;
    Fetcher fetcher(fake.config(), http, clock);
    TempDir dest(fs::temp_directory_path(), "malcve-dl");
    auto run = run_downloads(fake, fetcher, dest.path());
    ASSERT_EQ(run.failed.size(), 1u);
    EXPECT_EQ(run.failed[0].first.attempts, 3);
    EXPECT_EQ(fake.hits(), 3);
    EXPECT_NE(run.failed[0].second.find("HTTP 503"), std::string::npos);
}

TEST(DownloadWorker, ConfigIsValidated) {
    FetchConfig c;
    c.url_template = "http://example.invalid/files/";
    EXPECT_THROW(c.validate(), ConfigError);
    c.url_template = "http://example.invalid/{sha256}";
    c.requests_per_interval = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// Analysis

TEST(Analysis, PlantedCveRanksFirstAndIsPredicted) {
    E2eEnv env;
    auto ctx = env.context();
    ctx.check();
    for (const auto& s : planted_samples()) {
        SCOPED_TRACE(s.name);
        auto r = run_analysis(sample_jar(s.name), ctx);
        EXPECT_EQ(r.state, ReportState::done);
        EXPECT_FALSE(r.failure);
        ASSERT_FALSE(r.candidates.empty());
        EXPECT_EQ(r.candidates[0].cve_id, s.cve);
        EXPECT_EQ(r.candidates[0].source, rerank::CandidateSource::retrieval);
        ASSERT_TRUE(r.prediction);
        EXPECT_EQ(r.prediction->matched_cve, s.cve);
        EXPECT_GE(r.search_queries.size(), 4u);
        ASSERT_TRUE(r.deobfuscation);
        EXPECT_GT(r.deobfuscation->fold.total_folds, 0u);
    }
}

TEST(Analysis, ReportCarriesMetadata) {
    E2eEnv env;
    auto ctx = env.context();
    auto r = run_analysis(sample_jar("s1"), ctx);
    auto j = r.to_json();
    const auto prompts = llm::PromptSet::load();
    EXPECT_EQ(j["metadata"]["prompts"]["summarize"], prompts.summarize.sha256);
    EXPECT_EQ(j["metadata"]["prompts"]["queries"], prompts.queries.sha256);
    EXPECT_EQ(j["metadata"]["prompts"]["predict"], prompts.predict.sha256);
    EXPECT_EQ(j["metadata"]["models"]["embedding"], "hashed-bow-v1");
    EXPECT_EQ(j["metadata"]["timestamps"]["started"], "2024-05-01T09:30:00Z");
    EXPECT_EQ(j["metadata"]["pipeline_version"], std::string(kPipelineVersion));
    EXPECT_EQ(j["metadata"]["llm_exchanges"].size(), 3u);
    EXPECT_EQ(j["metadata"]["config"]["fusion"]["bm25_statistics"], "candidate_pool");
    EXPECT_EQ(j["file_sha256"], sha256_file(sample_jar("s1")));
    EXPECT_EQ(j["decompile"]["tool_used"], "cfr");
    EXPECT_GT(r.cost.total_scaled(), 0u);

    std::vector<std::string> keys;
    for (const auto& [k, v] : j.items()) keys.push_back(k);
    std::vector<std::string> want{"file_sha256", "input_name",     "state",    "failure",
                                  "decompile",   "deobfuscation",  "code_summary", "search_queries",
                                  "candidates",  "prediction",     "metadata"};
    EXPECT_EQ(keys, want);
}

TEST(Analysis, BenignShortCircuits) {
    E2eEnv env;
    auto r = run_analysis(sample_jar("benign"), env.context());
    EXPECT_EQ(r.state, ReportState::done);
    ASSERT_TRUE(r.code_summary);
    EXPECT_EQ(r.code_summary->verdict.label, llm::Label::Benign);
    EXPECT_TRUE(r.search_queries.empty());
    EXPECT_TRUE(r.candidates.empty());
    EXPECT_FALSE(r.prediction);
    EXPECT_EQ(r.to_json()["metadata"]["llm_exchanges"].size(), 1u);
}

TEST(Analysis, FallbackDecompilerUsedOnce) {
    E2eEnv env("fail", "ok");
    auto r = run_analysis(sample_jar("s1"), env.context());
    EXPECT_EQ(r.state, ReportState::done);
    EXPECT_EQ(r.decompile->tool_used, "procyon");
    EXPECT_EQ(env.invocations("cfr"), 1u);
    EXPECT_EQ(env.invocations("procyon"), 1u);
}

TEST(Analysis, DoubleDecompileFailureExcludes) {
    E2eEnv env("fail", "fail");
    auto r = run_analysis(sample_jar("s1"), env.context());
    EXPECT_EQ(r.state, ReportState::excluded);
    EXPECT_FALSE(r.code_summary);
    EXPECT_FALSE(r.prediction);
    EXPECT_EQ(env.invocations("cfr"), 1u);
    EXPECT_EQ(env.invocations("procyon"), 1u);
    EXPECT_EQ(r.to_json()["decompile"]["status"], "excluded");
    EXPECT_EQ(testing_support::count_entries(env.work_dir()), 0u);
}

TEST(Analysis, ModelFailureIsRecordedWithStage) {
    E2eEnv env;
    auto script = nlohmann::json::parse(read_file(testing_support::e2e_fixture("mock_llm.json")));
    auto& rules = script["rules"];
    rules.erase(std::remove_if(rules.begin(), rules.end(), [](const nlohmann::json& r) { return r["step"] == "predict"; }),
                rules.end());
    env.mock() = llm::MockBackend::from_json(script);
    auto r = run_analysis(sample_jar("s2"), env.context());
    EXPECT_EQ(r.state, ReportState::failed);
    ASSERT_TRUE(r.failure);
    EXPECT_EQ(r.failure->stage, "predict");
    EXPECT_TRUE(r.code_summary);
    EXPECT_FALSE(r.candidates.empty());
    EXPECT_FALSE(r.prediction);
}

TEST(Analysis, ContextChecksRejectMismatches) {
    E2eEnv env;
    auto ctx = env.context();
    ctx.prices.erase("gpt-4o-mini");
    EXPECT_THROW(ctx.check(), ConfigError);
    auto ctx2 = env.context();
    embed::HashedBagEmbedder other(256, "other-model");
    pipeline::PipelineContext bad{ctx2.config, ctx2.kb, ctx2.index, other, ctx2.llm, ctx2.prompts, ctx2.prices,
                                  ctx2.clock, ctx2.work_dir};
    EXPECT_THROW(bad.check(), ConfigError);
    EXPECT_THROW(run_analysis(env.root() / "missing.jar", env.context()), PreconditionError);
}

TEST(Analysis, RerunsAreByteIdentical) {
    E2eEnv env;
    for (const auto& s : planted_samples())
        EXPECT_EQ(run_analysis(sample_jar(s.name), env.context()).serialize(),
                  run_analysis(sample_jar(s.name), env.context()).serialize());
}

// ---------------------------------------------------------------------------
// Batch

namespace {

std::map<std::string, std::string> reports_in(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = read_file(e.path());
    return out;
}

std::vector<std::string> suite_entries() { return read_manifest(testing_support::e2e_fixture("manifest.txt")); }

}  // namespace

TEST(Batch, EmptyManifest) {
    E2eEnv env;
    auto s = run_batch({}, env.context(), {env.root() / "out", 1});
    EXPECT_EQ(s.total(), 0u);
    EXPECT_EQ(s.done + s.failed + s.excluded, 0u);
    EXPECT_EQ(s.total_cost_scaled, 0u);
}

TEST(Batch, ContentIndependentOfWorkerCount) {
    E2eEnv env;
    std::vector<std::string> entries;
    for (int rep = 0; rep < 2; ++rep)
        for (const auto& e : suite_entries()) entries.push_back(e);
    entries.resize(10);
    auto one = run_batch(entries, env.context(), {env.root() / "out1", 1});
    auto four = run_batch(entries, env.context(), {env.root() / "out4", 4});
    EXPECT_EQ(one.total(), 10u);
    EXPECT_EQ(one.done, 10u);
    EXPECT_EQ(reports_in(env.root() / "out1"), reports_in(env.root() / "out4"));
    EXPECT_EQ(one.total_cost_scaled, four.total_cost_scaled);
    EXPECT_EQ(testing_support::count_entries(env.work_dir()), 0u);
}

TEST(Batch, CountsTerminalStates) {
    E2eEnv env;
    auto entries = suite_entries();
    entries.push_back((env.root() / "does-not-exist.jar").string());
    auto s = run_batch(entries, env.context(), {env.root() / "out", 2});
    EXPECT_EQ(s.done, 6u);
    EXPECT_EQ(s.failed, 1u);
    EXPECT_EQ(s.excluded, 0u);
    EXPECT_EQ(s.done + s.failed + s.excluded, s.total());
    std::uint64_t sum = 0;
    for (const auto& f : s.files) {
        EXPECT_TRUE(fs::exists(f.report));
        auto j = nlohmann::json::parse(read_file(f.report));
        EXPECT_EQ(j["state"], std::string(to_string(f.state)));
        sum += j["metadata"]["cost"]["total_scaled_1e-12"].get<std::uint64_t>();
    }
    EXPECT_EQ(sum, s.total_cost_scaled);
    EXPECT_EQ(s.files.back().failure_stage, "input");
}

TEST(Batch, ExcludedItemsAreCounted) {
    E2eEnv env("fail", "fail");
    auto s = run_batch(suite_entries(), env.context(), {env.root() / "out", 2});
    EXPECT_EQ(s.excluded, 6u);
    EXPECT_EQ(s.done, 0u);
}

TEST(Batch, JournalResumesFinishedItems) {
    E2eEnv env;
    auto entries = suite_entries();
    BatchOptions opts{env.root() / "out", 2, env.root() / "batch.journal"};
    auto first = run_batch({entries[0], entries[1]}, env.context(), opts);
    EXPECT_EQ(first.done, 2u);
    auto calls_before = env.invocations("cfr");
    auto second = run_batch(entries, env.context(), opts);
    EXPECT_EQ(second.done, 6u);
    EXPECT_TRUE(second.files[0].resumed);
    EXPECT_TRUE(second.files[1].resumed);
    EXPECT_FALSE(second.files[2].resumed);
    EXPECT_EQ(env.invocations("cfr") - calls_before, 4u);
    EXPECT_EQ(second.files[0].cost_scaled, first.files[0].cost_scaled);
}

TEST(Batch, DownloadsHashesBeforeAnalysis) {
    E2eEnv env;
    const auto body = read_file(sample_jar("s1"));
    const auto hash = sha256_hex(body);
    testing_support::LocalServer srv;
    srv.server().Get(R"(/f/([0-9a-f]+))", [&](const httplib::Request& req, httplib::Response& res) {
        if (req.matches[1].str() == hash) res.set_content(body, "application/java-archive");
        else res.status = 404;
    });
    srv.start();
    HttplibClient http;
    ManualClock clock;
    FetchConfig fc;
    fc.url_template = srv.url("/f/{sha256}");
    fc.retry.max_retries = 0;
    Fetcher fetcher(fc, http, clock);
    const std::string missing(64, 'e');
    auto ctx = env.context();
    BatchOptions opts{env.root() / "out", 1};
    opts.fetcher = &fetcher;
    auto s = run_batch({missing, hash}, ctx, opts);
    ASSERT_EQ(s.total(), 2u);
    EXPECT_EQ(s.files[0].state, ReportState::failed);
    EXPECT_EQ(s.files[0].failure_stage, "download");
    EXPECT_TRUE(fs::exists(report_path(env.root() / "out", missing)));
    // The download reached analysis; the stub decompilers find no sources beside it.
    EXPECT_EQ(s.files[1].sha256, hash);
    EXPECT_EQ(s.files[1].state, ReportState::excluded);
    EXPECT_EQ(testing_support::count_entries(env.work_dir()), 0u);

    BatchOptions no_fetch{env.root() / "out", 1};
    EXPECT_THROW(run_batch({hash}, ctx, no_fetch), ConfigError);
}
