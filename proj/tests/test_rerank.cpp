// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <map>
#include <random>

#include "malcve/rerank.hpp"
#include "oracles/bm25_reference.hpp"
#include "oracles/brute_force.hpp"

using namespace malcve;
using namespace malcve::rerank;

namespace {

using Strings = std::vector<std::string>;

std::string cve(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "CVE-2019-%05zu", i);
    return buf;
}

kb::SnapshotPtr kb_with(const std::vector<std::pair<std::string, Strings>>& recs) {
    std::vector<kb::RecordPtr> out;
    for (const auto& [id, cwes] : recs) {
        kb::CveRecord r;
        r.cve_id = id;
        r.description = "desc " + id;
        r.description_vector = {1.0f};
        r.cwe_ids = cwes;
        out.push_back(std::make_shared<const kb::CveRecord>(std::move(r)));
    }
    kb::KbManifest m;
    m.embedding_dim = 1;
    return std::make_shared<const kb::KbSnapshot>(std::move(out), m);
}

RankedCve ranked(const std::string& id, double score) {
    RankedCve r;
    r.cve_id = id;
    r.final_score = score;
    return r;
}

}  // namespace

TEST(Tokenize, Examples) {
    EXPECT_EQ(tokenize("sun.awt.SunToolkit"), (Strings{"sun", "awt", "suntoolkit"}));
    EXPECT_EQ(tokenize("Java"), Strings{});
    EXPECT_EQ(tokenize("java.io.FileOutputStream"), (Strings{"io", "fileoutputstream"}));
    EXPECT_EQ(tokenize("a--b__c"), (Strings{"a", "b", "c"}));
}

TEST(Bm25, NoOverlapIsZero) {
    Bm25Corpus c({{"alpha", "beta"}, {"gamma"}});
    EXPECT_EQ(c.score(Strings{"delta"}, 0), 0.0);
    EXPECT_THROW(Bm25Corpus({}), PreconditionError);
    EXPECT_THROW(c.score(Strings{"alpha"}, 2), PreconditionError);
}

TEST(Bm25, SingleDocHandEvaluated) {
    // N=1, n=1, f=2, |D|=avgdl=3: idf = ln(1 + 0.5/1.5) = ln(4/3);
    // tf part = 2*2.2/(2+1.2) = 1.375.
    Bm25Corpus c({{"x", "x", "y"}});
    EXPECT_NEAR(c.score(Strings{"x"}, 0), std::log(4.0 / 3.0) * 1.375, 1e-15);
    // Repeated query tokens each contribute.
    EXPECT_NEAR(c.score(Strings{"x", "x"}, 0), 2 * std::log(4.0 / 3.0) * 1.375, 1e-15);
}

TEST(Bm25, MatchesReferenceOnRandomCorpora) {
    std::mt19937_64 rng(21);
    for (int round = 0; round < 5; ++round) {
        std::vector<Strings> docs(100);
        for (auto& d : docs) {
            std::size_t len = rng() % 30;
            for (std::size_t i = 0; i < len; ++i) d.push_back("w" + std::to_string(rng() % 60));
        }
        Bm25Corpus c(docs);
        for (int q = 0; q < 20; ++q) {
            Strings query;
            for (std::size_t i = 0, n = 1 + rng() % 6; i < n; ++i) query.push_back("w" + std::to_string(rng() % 70));
            for (std::size_t d = 0; d < docs.size(); ++d)
                ASSERT_NEAR(c.score(query, d), oracle::bm25_reference(query, d, docs), 1e-9);
        }
    }
}

TEST(Normalize, Examples) {
    EXPECT_EQ(normalize(std::vector<double>{2, 4, 6}), (std::vector<double>{0.0, 0.5, 1.0}));
    EXPECT_EQ(normalize(std::vector<double>{5, 5}), (std::vector<double>{1.0, 1.0}));
    EXPECT_TRUE(normalize(std::vector<double>{}).empty());
}

TEST(FuseScores, WeightExamples) {
    FusionConfig cfg;
    Strings ids{"CVE-2020-0001", "CVE-2020-0002"};
    // Candidate 1 is top on both signals, candidate 2 bottom on both.
    auto out = fuse_scores(ids, std::vector<double>{0.9, 0.1}, std::vector<double>{3.0, 0.0}, cfg);
    EXPECT_EQ(out[0].final_score, 1.0);
    // norm_sim = 0, norm_bm25 = 1 gives 0.3.
    out = fuse_scores(ids, std::vector<double>{0.9, 0.1}, std::vector<double>{0.0, 3.0}, cfg);
    EXPECT_EQ(out[1].cve_id, "CVE-2020-0002");
    EXPECT_NEAR(out[1].final_score, 0.3, 1e-12);
    EXPECT_NEAR(out[0].final_score, 0.7, 1e-12);
}

TEST(FuseScores, MatchesNaiveRecomputation) {
    std::mt19937_64 rng(22);
    std::uniform_real_distribution<double> u(0, 1);
    FusionConfig cfg;
    for (int round = 0; round < 300; ++round) {
        std::size_t n = 1 + rng() % 30;
        Strings ids;
        std::vector<double> sims, bm;
        for (std::size_t i = 0; i < n; ++i) {
            ids.push_back(cve(i));
            sims.push_back(u(rng));
            bm.push_back(rng() % 3 ? u(rng) * 10 : 0.0);
        }
        auto got = fuse_scores(ids, sims, bm, cfg);
        auto ref = oracle::naive_fusion(ids, sims, bm, 0.7, 0.3);
        ASSERT_EQ(got.size(), ref.size());
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_EQ(got[i].cve_id, ref[i].id);
            EXPECT_NEAR(got[i].final_score, ref[i].score, 1e-12);
            EXPECT_NEAR(got[i].final_score, 0.7 * got[i].norm_sim + 0.3 * got[i].norm_bm25, 1e-12);
            EXPECT_GE(got[i].final_score, 0.0);
            EXPECT_LE(got[i].final_score, 1.0);
        }
    }
}

TEST(FuseScores, AffineInvariantOrdering) {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> u(0, 1);
    FusionConfig cfg;
    for (int round = 0; round < 200; ++round) {
        std::size_t n = 2 + rng() % 20;
        Strings ids;
        std::vector<double> sims, bm, scaled;
        for (std::size_t i = 0; i < n; ++i) {
            ids.push_back(cve(i));
            // Dyadic values keep the affine map exact in floating point.
            sims.push_back(static_cast<double>(rng() % 64) / 64.0);
            bm.push_back(static_cast<double>(rng() % 16));
            scaled.push_back(sims.back() * 4.0 + 0.5);
        }
        auto a = fuse_scores(ids, sims, bm, cfg);
        auto b = fuse_scores(ids, scaled, bm, cfg);
        for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(a[i].cve_id, b[i].cve_id);
    }
}

TEST(FuseScores, RaisingBm25NeverLowersRank) {
    std::mt19937_64 rng(24);
    std::uniform_real_distribution<double> u(0, 1);
    FusionConfig cfg;
    for (int round = 0; round < 200; ++round) {
        std::size_t n = 3 + rng() % 10;
        Strings ids;
        std::vector<double> sims, bm;
        for (std::size_t i = 0; i < n; ++i) {
            ids.push_back(cve(i));
            sims.push_back(u(rng));
            bm.push_back(u(rng) * 5);
        }
        auto rank_of = [&](const std::vector<RankedCve>& r, const std::string& id) {
            return std::find_if(r.begin(), r.end(), [&](const RankedCve& x) { return x.cve_id == id; }) - r.begin();
        };
        std::size_t target = rng() % n;
        auto before = rank_of(fuse_scores(ids, sims, bm, cfg), ids[target]);
        bm[target] += u(rng) * 3;
        auto after = rank_of(fuse_scores(ids, sims, bm, cfg), ids[target]);
        EXPECT_LE(after, before);
    }
}

TEST(Fuse, PermutationInvariant) {
    std::mt19937_64 rng(25);
    std::vector<index::AggregatedHit> cands;
    std::map<std::string, std::string> desc;
    for (std::size_t i = 0; i < 15; ++i) {
        cands.push_back({cve(i), static_cast<double>(rng() % 100) / 100.0, {0}});
        desc[cve(i)] = "uses lib" + std::to_string(rng() % 4) + " and lib" + std::to_string(rng() % 4);
    }
    auto lookup = [&](const std::string& id) -> const std::string& { return desc.at(id); };
    Strings libs{"com.lib1.Foo", "org.lib2"};
    auto a = fuse(cands, libs, lookup, FusionConfig{});
    std::shuffle(cands.begin(), cands.end(), rng);
    auto b = fuse(cands, libs, lookup, FusionConfig{});
    EXPECT_EQ(a, b);
}

TEST(Fuse, LexicalOverlapBreaksSemanticTie) {
    std::vector<index::AggregatedHit> cands{{"CVE-2012-0001", 0.5, {0}}, {"CVE-2012-0002", 0.5, {0}}};
    std::map<std::string, std::string> desc{{"CVE-2012-0001", "heap overflow in image parser"},
                                            {"CVE-2012-0002", "sandbox escape using sun.awt.SunToolkit getField"}};
    auto out = fuse(cands, Strings{"sun.awt.SunToolkit"},
                    [&](const std::string& id) -> const std::string& { return desc.at(id); }, FusionConfig{});
    EXPECT_EQ(out[0].cve_id, "CVE-2012-0002");
    EXPECT_GT(out[0].bm25_score, 0.0);
    EXPECT_EQ(out[1].bm25_score, 0.0);
}

TEST(FusionConfig, Validation) {
    FusionConfig c;
    c.sim_weight = 0.6;
    EXPECT_THROW(c.validate(), ConfigError);
    c = FusionConfig{};
    c.bm25_b = 1.5;
    EXPECT_THROW(c.validate(), ConfigError);
    c = FusionConfig{};
    c.bm25_k1 = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ExpandByCwe, NoCweIsNoop) {
    auto kb = kb_with({{"CVE-2020-0001", {}}, {"CVE-2020-0002", {}}});
    std::vector<RankedCve> in{ranked("CVE-2020-0001", 0.9)};
    EXPECT_EQ(expand_by_cwe(in, *kb, FusionConfig{}), in);
}

TEST(ExpandByCwe, SingleSiblingAppendedOnce) {
    auto kb = kb_with({{"CVE-2020-0001", {"CWE-284"}}, {"CVE-2020-0002", {"CWE-284"}}, {"CVE-2020-0003", {"CWE-79"}}});
    std::vector<RankedCve> in{ranked("CVE-2020-0001", 0.9), ranked("CVE-2020-0003", 0.5)};
    auto out = expand_by_cwe(in, *kb, FusionConfig{});
    ASSERT_EQ(out.size(), 3u);
    EXPECT_EQ(out[1].cve_id, "CVE-2020-0002");
    EXPECT_EQ(out[1].source, CandidateSource::cwe_expansion);
    EXPECT_NEAR(out[1].final_score, 0.9 - 1e-6, 1e-15);
    EXPECT_EQ(out[2].cve_id, "CVE-2020-0003");
}

TEST(ExpandByCwe, OnlyTopNContributeCwes) {
    auto kb = kb_with({{"CVE-2020-0001", {"CWE-1"}}, {"CVE-2020-0002", {"CWE-2"}}, {"CVE-2020-0003", {"CWE-2"}}});
    FusionConfig cfg;
    cfg.output_top_n = 1;
    std::vector<RankedCve> in{ranked("CVE-2020-0001", 0.9), ranked("CVE-2020-0002", 0.5)};
    EXPECT_EQ(expand_by_cwe(in, *kb, cfg), in);
}

TEST(ExpandByCwe, RandomInstancesPreserveRetrievalEntries) {
    std::mt19937_64 rng(26);
    for (int round = 0; round < 200; ++round) {
        std::vector<std::pair<std::string, Strings>> recs;
        for (std::size_t i = 0; i < 40; ++i) {
            Strings cwes;
            if (rng() % 3) cwes.push_back("CWE-" + std::to_string(rng() % 5));
            if (rng() % 4 == 0) cwes.push_back("CWE-" + std::to_string(5 + rng() % 3));
            recs.push_back({cve(i), cwes});
        }
        auto kb = kb_with(recs);
        std::vector<std::string> ids;
        std::vector<double> sims, bm;
        for (std::size_t i = 0; i < 40; ++i)
            if (rng() % 2) {
                ids.push_back(cve(i));
                sims.push_back(static_cast<double>(rng() % 10));
                bm.push_back(static_cast<double>(rng() % 3));
            }
        if (ids.empty()) continue;
        auto in = fuse_scores(ids, sims, bm, FusionConfig{});
        auto out = expand_by_cwe(in, *kb, FusionConfig{});
        // Input is an order-preserving subsequence with untouched values.
        std::vector<RankedCve> retrieval;
        std::set<std::string> seen;
        for (const auto& r : out) {
            EXPECT_TRUE(seen.insert(r.cve_id).second) << "duplicate " << r.cve_id;
            if (r.source == CandidateSource::retrieval) retrieval.push_back(r);
        }
        EXPECT_EQ(retrieval, in);
        EXPECT_TRUE(std::is_sorted(out.begin(), out.end(), ranked_order));
        // Every expansion shares a CWE with some top-10 input entry.
        std::set<std::string> top_cwes;
        for (std::size_t i = 0; i < std::min<std::size_t>(10, in.size()); ++i)
            for (const auto& c : kb->cwes_of(in[i].cve_id)) top_cwes.insert(c);
        for (const auto& r : out) {
            if (r.source != CandidateSource::cwe_expansion) continue;
            bool shares = false;
            for (const auto& c : kb->cwes_of(r.cve_id)) shares |= top_cwes.count(c) > 0;
            EXPECT_TRUE(shares);
        }
    }
}

TEST(PromptCandidates, RetrievalFirstThenExpansionFill) {
    std::vector<RankedCve> list{ranked("A", 0.9), ranked("B", 0.9 - 1e-6), ranked("C", 0.5)};
    list[1].source = CandidateSource::cwe_expansion;
    auto two = prompt_candidates(list, 2);
    EXPECT_EQ(two[0].cve_id, "A");
    EXPECT_EQ(two[1].cve_id, "C");
    auto ten = prompt_candidates(list, 10);
    ASSERT_EQ(ten.size(), 3u);
    EXPECT_EQ(ten[2].cve_id, "B");
}
