// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <atomic>
#include <random>

#include "malcve/cve_kb.hpp"
#include "malcve/nvd_client.hpp"
#include "test_support.hpp"

using namespace malcve;
using namespace malcve::kb;
using testing_support::fixture;

namespace {

nlohmann::json load_json(const std::string& rel) { return nlohmann::json::parse(read_file(fixture(rel))); }

nlohmann::json entry(const std::string& id, const std::string& desc, std::vector<std::string> cwes = {},
                     std::optional<double> score = std::nullopt) {
    nlohmann::json cve = {{"id", id}, {"vulnStatus", "Analyzed"}, {"descriptions", {{{"lang", "en"}, {"value", desc}}}}};
    nlohmann::json descs = nlohmann::json::array();
    for (const auto& c : cwes) descs.push_back({{"lang", "en"}, {"value", c}});
    cve["weaknesses"] = {{{"type", "Primary"}, {"description", descs}}};
    if (score)
        cve["metrics"] = {{"cvssMetricV31",
                           {{{"type", "Primary"}, {"cvssData", {{"vectorString", "CVSS:3.1/AV:N"}, {"baseScore", *score}}}}}}};
    return {{"cve", cve}};
}

nlohmann::json feed(std::vector<nlohmann::json> entries) {
    return {{"version", "2.0"}, {"timestamp", "2024-01-01T00:00:00.000"}, {"totalResults", entries.size()},
            {"vulnerabilities", entries}};
}

/// Fails every embed call whose text contains "POISON".
class PickyEmbedder final : public embed::EmbeddingProvider {
public:
    explicit PickyEmbedder(std::size_t dim) : inner_(dim) {}
    std::size_t dim() const override { return inner_.dim(); }
    const std::string& model_id() const override { return inner_.model_id(); }
    std::vector<embed::Vector> embed_batch(std::span<const std::string> texts, embed::EmbedUsage* u = nullptr) override {
        for (std::size_t i = 0; i < texts.size(); ++i)
            if (texts[i].find("POISON") != std::string::npos)
                throw EmbeddingError("refused", static_cast<std::ptrdiff_t>(i));
        ++calls;
        return inner_.embed_batch(texts, u);
    }
    int calls = 0;

private:
    embed::HashedBagEmbedder inner_;
};

std::string dir_bytes(const fs::path& dir) {
    return read_file(dir / "manifest.json") + "|" + read_file(dir / "records.jsonl") + "|" +
           read_file(dir / "vectors.bin");
}

}  // namespace

TEST(NvdParse, FixtureFeed) {
    auto parsed = parse_nvd_feed(load_json("nvd/feed_java.json"));
    EXPECT_EQ(parsed.meta.version, "2.0");
    ASSERT_EQ(parsed.entries.size(), 17u);
    const auto& e = parsed.entries[0];
    EXPECT_EQ(e.cve_id, "CVE-2012-4681");
    ASSERT_TRUE(e.description);
    EXPECT_NE(e.description->find("com.sun.beans.finder.ClassFinder.findClass"), std::string::npos);
    EXPECT_EQ(e.cwe_ids, std::vector<std::string>{"CWE-284"});
    EXPECT_EQ(e.cvss_score, 9.8);
    // Placeholder weakness values are not CWE ids.
    EXPECT_TRUE(parsed.entries[3].cwe_ids.empty());
    EXPECT_EQ(parsed.entries[3].cvss_vector, "AV:N/AC:L/Au:N/C:C/I:C/A:C");
    EXPECT_TRUE(parsed.entries[15].rejected);
    EXPECT_FALSE(parsed.entries[16].description);
}

TEST(NvdParse, MalformedEntryNamesIndex) {
    auto doc = feed({entry("CVE-2020-0001", "a"), {{"cve", {{"descriptions", nlohmann::json::array()}}}}});
    try {
        parse_nvd_feed(doc);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.entry_index(), 1);
        EXPECT_NE(std::string(e.what()).find("entry 1"), std::string::npos);
    }
    EXPECT_THROW(parse_nvd_feed(nlohmann::json::object()), ParseError);
}

TEST(NvdParse, CvssOutOfRangeRejected) {
    EXPECT_THROW(parse_nvd_feed(feed({entry("CVE-2020-0001", "a", {}, 11.0)})), ParseError);
}

TEST(NvdParse, PrefersV31OverOtherVersions) {
    auto e = entry("CVE-2020-0001", "a");
    e["cve"]["metrics"] = {
        {"cvssMetricV2", {{{"type", "Primary"}, {"cvssData", {{"vectorString", "AV:N"}, {"baseScore", 5.0}}}}}},
        {"cvssMetricV40", {{{"type", "Primary"}, {"cvssData", {{"vectorString", "CVSS:4.0/X"}, {"baseScore", 6.0}}}}}},
        {"cvssMetricV31",
         {{{"type", "Secondary"}, {"cvssData", {{"vectorString", "CVSS:3.1/S"}, {"baseScore", 7.0}}}},
          {{"type", "Primary"}, {"cvssData", {{"vectorString", "CVSS:3.1/P"}, {"baseScore", 8.0}}}}}}};
    auto p = parse_nvd_feed(feed({e}));
    EXPECT_EQ(p.entries[0].cvss_vector, "CVSS:3.1/P");
    EXPECT_EQ(p.entries[0].cvss_score, 8.0);
    e["cve"]["metrics"].erase("cvssMetricV31");
    p = parse_nvd_feed(feed({e}));
    EXPECT_EQ(p.entries[0].cvss_vector, "CVSS:4.0/X");
}

TEST(Ingest, ThreeEntriesIntoEmptyKb) {
    KnowledgeBase kb(64, "hashed-bow-v1");
    embed::HashedBagEmbedder emb(64);
    auto stats = kb.ingest_feed(load_json("nvd/feed_three.json"), emb);
    EXPECT_EQ(stats, (IngestStats{3, 0, 0, {}}));
    EXPECT_EQ(kb.size(), 3u);
    EXPECT_EQ(kb.manifest().record_count, 3u);
    const auto* r = kb.snapshot()->find("CVE-2012-4681");
    ASSERT_NE(r, nullptr);
    EXPECT_NE(r->description.find("com.sun.beans.finder.ClassFinder.findClass"), std::string::npos);
    EXPECT_EQ(r->description_vector, emb.embed_text(r->description));
}

TEST(Ingest, SkipsRejectedAndUntranslated) {
    KnowledgeBase kb(64, "hashed-bow-v1");
    embed::HashedBagEmbedder emb(64);
    auto stats = kb.ingest_feed(load_json("nvd/feed_java.json"), emb);
    EXPECT_EQ(stats.inserted, 15u);
    EXPECT_EQ(stats.skipped, 2u);
    ASSERT_EQ(stats.notes.size(), 2u);
    EXPECT_EQ(stats.notes[0].reason, "rejected");
    EXPECT_EQ(kb.snapshot()->find("CVE-2020-99990"), nullptr);
}

TEST(Ingest, IdempotentByteIdentical) {
    TempDir tmp(fs::temp_directory_path());
    KnowledgeBase kb(64, "hashed-bow-v1");
    embed::HashedBagEmbedder emb(64);
    auto doc = load_json("nvd/feed_java.json");
    kb.ingest_feed(doc, emb);
    kb.save(tmp.path() / "a");
    auto again = kb.ingest_feed(doc, emb);
    EXPECT_EQ(again.inserted, 0u);
    EXPECT_EQ(again.updated, 0u);
    EXPECT_EQ(again.skipped, 17u);
    kb.save(tmp.path() / "b");
    EXPECT_EQ(dir_bytes(tmp.path() / "a"), dir_bytes(tmp.path() / "b"));
}

TEST(Ingest, ChangedDescriptionReembeds) {
    KnowledgeBase kb(32, "hashed-bow-v1");
    embed::HashedBagEmbedder emb(32);
    kb.ingest_feed(feed({entry("CVE-2020-0001", "old text"), entry("CVE-2020-0002", "same")}), emb);
    auto stats = kb.ingest_feed(feed({entry("CVE-2020-0001", "new text"), entry("CVE-2020-0002", "same")}), emb);
    EXPECT_EQ(stats, (IngestStats{0, 1, 1, {}}));
    const auto* r = kb.snapshot()->find("CVE-2020-0001");
    EXPECT_EQ(r->description, "new text");
    EXPECT_EQ(r->description_vector, emb.embed_text("new text"));
}

TEST(Ingest, MetadataOnlyChangeUpdatesWithoutReembedding) {
    KnowledgeBase kb(32, "hashed-bow-v1");
    PickyEmbedder emb(32);
    kb.ingest_feed(feed({entry("CVE-2020-0001", "text")}), emb);
    int calls = emb.calls;
    auto stats = kb.ingest_feed(feed({entry("CVE-2020-0001", "text", {"CWE-79"})}), emb);
    EXPECT_EQ(stats.updated, 1u);
    EXPECT_EQ(emb.calls, calls);
    EXPECT_EQ(kb.get_by_cwe("CWE-79").size(), 1u);
}

TEST(Ingest, EmbeddingFailureSkipsOnlyThatEntry) {
    KnowledgeBase kb(32, "hashed-bow-v1");
    PickyEmbedder emb(32);
    auto stats = kb.ingest_feed(feed({entry("CVE-2020-0001", "fine"), entry("CVE-2020-0002", "POISON pill"),
                                      entry("CVE-2020-0003", "also fine")}),
                                emb);
    EXPECT_EQ(stats.inserted, 2u);
    EXPECT_EQ(stats.skipped, 1u);
    ASSERT_EQ(stats.notes.size(), 1u);
    EXPECT_EQ(stats.notes[0].cve_id, "CVE-2020-0002");
    EXPECT_NE(stats.notes[0].reason.find("embedding failed"), std::string::npos);
}

TEST(Ingest, MismatchedEmbedderRejected) {
    KnowledgeBase kb(32, "hashed-bow-v1");
    embed::HashedBagEmbedder wrong_dim(16);
    EXPECT_THROW(kb.ingest_feed(feed({entry("CVE-2020-0001", "a")}), wrong_dim), ConfigError);
    embed::HashedBagEmbedder wrong_model(32, "other-model");
    EXPECT_THROW(kb.ingest_feed(feed({entry("CVE-2020-0001", "a")}), wrong_model), ConfigError);
}

TEST(GetByCwe, SetFilterAndOrder) {
    KnowledgeBase kb(16, "hashed-bow-v1");
    embed::HashedBagEmbedder emb(16);
    kb.ingest_feed(feed({entry("CVE-2020-0002", "b", {"CWE-284"}), entry("CVE-2020-0001", "a", {"CWE-284"}),
                         entry("CVE-2020-0003", "c", {"CWE-79"})}),
                   emb);
    auto hits = kb.get_by_cwe("CWE-284");
    ASSERT_EQ(hits.size(), 2u);
    EXPECT_EQ(hits[0]->cve_id, "CVE-2020-0001");
    EXPECT_EQ(hits[1]->cve_id, "CVE-2020-0002");
    EXPECT_TRUE(kb.get_by_cwe("CWE-1").empty());
}

TEST(GetByCwe, MatchesLinearScanOnRandomKb) {
    std::mt19937_64 rng(7);
    std::vector<nlohmann::json> entries;
    for (int i = 0; i < 200; ++i) {
        std::vector<std::string> cwes;
        for (int c = 0; c < 3; ++c)
            if (rng() % 2) cwes.push_back("CWE-" + std::to_string(rng() % 6));
        std::sort(cwes.begin(), cwes.end());
        cwes.erase(std::unique(cwes.begin(), cwes.end()), cwes.end());
        char id[32];
        std::snprintf(id, sizeof id, "CVE-2021-%05d", static_cast<int>(rng() % 100000));
        entries.push_back(entry(id, "text " + std::to_string(i), cwes));
    }
    KnowledgeBase kb(16, "hashed-bow-v1");
    embed::HashedBagEmbedder emb(16);
    kb.ingest_feed(feed(entries), emb);
    auto snap = kb.snapshot();
    for (int c = 0; c < 7; ++c) {
        std::string cwe = "CWE-" + std::to_string(c);
        std::vector<std::string> expect;
        for (const auto& r : snap->records())
            for (const auto& x : r->cwe_ids)
                if (x == cwe) expect.push_back(r->cve_id);
        std::sort(expect.begin(), expect.end());
        std::vector<std::string> got;
        for (const auto& r : kb.get_by_cwe(cwe)) {
            EXPECT_TRUE(r->has_cwe(cwe));
            got.push_back(r->cve_id);
        }
        EXPECT_EQ(got, expect) << cwe;
    }
}

TEST(Persistence, RoundTripBitExact) {
    TempDir tmp(fs::temp_directory_path());
    KnowledgeBase kb(64, "hashed-bow-v1");
    embed::HashedBagEmbedder emb(64);
    kb.ingest_feed(load_json("nvd/feed_java.json"), emb);
    kb.save(tmp.path());
    auto loaded = KnowledgeBase::load(tmp.path());
    ASSERT_EQ(loaded.size(), kb.size());
    auto a = kb.snapshot(), b = loaded.snapshot();
    for (std::size_t i = 0; i < a->size(); ++i) {
        EXPECT_EQ(a->at(i), b->at(i));
        EXPECT_EQ(std::memcmp(a->at(i).description_vector.data(), b->at(i).description_vector.data(), 64 * 4), 0);
    }
    EXPECT_EQ(b->manifest().embedding_dim, 64u);
    EXPECT_EQ(b->manifest().source_feed_version, "2.0");
    EXPECT_EQ(format_utc(b->manifest().last_refresh), "2024-03-01T12:00:00Z");
}

TEST(Persistence, LoadRejectsInconsistentFiles) {
    TempDir tmp(fs::temp_directory_path());
    KnowledgeBase kb(8, "hashed-bow-v1");
    embed::HashedBagEmbedder emb(8);
    kb.ingest_feed(load_json("nvd/feed_three.json"), emb);
    kb.save(tmp.path());
    auto vec = read_file(tmp.path() / "vectors.bin");
    write_file_atomic(tmp.path() / "vectors.bin", vec.substr(0, vec.size() - 4));
    EXPECT_THROW(KnowledgeBase::load(tmp.path()), ParseError);
    EXPECT_THROW(KnowledgeBase::load(tmp.path() / "missing"), ConfigError);
}

// ---------------------------------------------------------------------------
// Refresh against a scripted NVD server

namespace {

struct FakeNvd {
    testing_support::LocalServer srv;
    std::atomic<int> hits{0};
    std::atomic<int> fail{0};
    nlohmann::json pages;  // array of page documents
    std::string last_query;
    std::string last_api_key;
    std::mutex mu;

    FakeNvd() {
        srv.server().Get("/rest/json/cves/2.0", [this](const httplib::Request& req, httplib::Response& res) {
            ++hits;
            {
                std::lock_guard lock(mu);
                last_query = req.get_param_value("lastModStartDate") + "|" + req.get_param_value("lastModEndDate");
                last_api_key = req.get_header_value("apiKey");
            }
            if (fail > 0) {
                --fail;
                res.status = 503;
                return;
            }
            std::size_t start = std::stoul(req.get_param_value("startIndex"));
            for (const auto& p : pages)
                if (p.value("startIndex", std::size_t{0}) == start) {
                    res.set_content(p.dump(), "application/json");
                    return;
                }
            res.set_content(feed({}).dump(), "application/json");
        });
        srv.start();
    }
};

NvdClientConfig nvd_cfg(const FakeNvd& f) {
    NvdClientConfig c;
    c.base_url = f.srv.url("/rest/json/cves/2.0");
    c.api_key = "secret";
    c.results_per_page = 2;
    return c;
}

}  // namespace

TEST(Refresh, EmptyDeltaAdvancesTimestamp) {
    FakeNvd nvd;
    HttplibClient http(std::chrono::seconds(5));
    ManualClock clock(parse_utc_or_throw("2024-05-01T00:00:00Z"));
    HttpNvdClient client(nvd_cfg(nvd), http, clock);
    KnowledgeBase kb(16, "hashed-bow-v1");
    embed::HashedBagEmbedder emb(16);
    auto stats = kb.refresh(clock.now(), client, emb, clock);
    EXPECT_EQ(stats, (IngestStats{0, 0, 0, {}}));
    EXPECT_EQ(format_utc(kb.manifest().last_refresh), "2024-05-01T00:00:00Z");
    EXPECT_EQ(nvd.last_api_key, "secret");
    EXPECT_EQ(nvd.last_query, "2024-05-01T00:00:00.000+00:00|2024-05-01T00:00:00.000+00:00");
}

TEST(Refresh, TwoModifiedOneNewAcrossPages) {
    FakeNvd nvd;
    auto p0 = feed({entry("CVE-2020-0001", "changed one"), entry("CVE-2020-0002", "changed two")});
    p0["totalResults"] = 3;
    p0["startIndex"] = 0;
    auto p1 = feed({entry("CVE-2020-0003", "brand new")});
    p1["totalResults"] = 3;
    p1["startIndex"] = 2;
    nvd.pages = {p0, p1};
    HttplibClient http(std::chrono::seconds(5));
    ManualClock clock(parse_utc_or_throw("2024-05-01T00:00:00Z"));
    HttpNvdClient client(nvd_cfg(nvd), http, clock);
    KnowledgeBase kb(16, "hashed-bow-v1");
    embed::HashedBagEmbedder emb(16);
    kb.ingest_feed(feed({entry("CVE-2020-0001", "one"), entry("CVE-2020-0002", "two")}), emb);
    auto stats = kb.refresh(parse_utc_or_throw("2024-04-01"), client, emb, clock);
    EXPECT_EQ(stats, (IngestStats{1, 2, 0, {}}));
    EXPECT_EQ(nvd.hits.load(), 2);
    EXPECT_EQ(kb.size(), 3u);
}

TEST(Refresh, LongRangeSplitIntoApiWindows) {
    FakeNvd nvd;
    HttplibClient http(std::chrono::seconds(5));
    ManualClock clock(parse_utc_or_throw("2024-12-31T00:00:00Z"));
    HttpNvdClient client(nvd_cfg(nvd), http, clock);
    client.fetch_modified(parse_utc_or_throw("2024-01-01"), clock.now());
    // 365 days in windows of at most 120 days.
    EXPECT_EQ(nvd.hits.load(), 4);
}

TEST(Refresh, ServerErrorsLeaveKbUnchanged) {
    FakeNvd nvd;
    nvd.fail = 3;
    HttplibClient http(std::chrono::seconds(5));
    ManualClock clock(parse_utc_or_throw("2024-05-01T00:00:00Z"));
    auto cfg = nvd_cfg(nvd);
    cfg.retry.max_retries = 2;  // three attempts in total
    HttpNvdClient client(cfg, http, clock);
    KnowledgeBase kb(16, "hashed-bow-v1");
    embed::HashedBagEmbedder emb(16);
    kb.ingest_feed(feed({entry("CVE-2020-0001", "one")}), emb);
    auto before = kb.manifest();
    EXPECT_THROW(kb.refresh(parse_utc_or_throw("2024-04-01"), client, emb, clock), RefreshError);
    EXPECT_EQ(nvd.hits.load(), 3);
    EXPECT_EQ(kb.size(), 1u);
    EXPECT_EQ(kb.manifest().last_refresh, before.last_refresh);
}

TEST(Snapshot, ReadersKeepConsistentView) {
    KnowledgeBase kb(16, "hashed-bow-v1");
    embed::HashedBagEmbedder emb(16);
    kb.ingest_feed(feed({entry("CVE-2020-0001", "one")}), emb);
    auto old = kb.snapshot();
    kb.ingest_feed(feed({entry("CVE-2020-0002", "two")}), emb);
    EXPECT_EQ(old->size(), 1u);
    EXPECT_EQ(kb.snapshot()->size(), 2u);
}
