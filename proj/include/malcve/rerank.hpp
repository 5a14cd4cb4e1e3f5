// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "malcve/cve_kb.hpp"
#include "malcve/errors.hpp"
#include "malcve/util/text.hpp"
#include "malcve/vector_index.hpp"

namespace malcve::rerank {

struct FusionConfig {
    double sim_weight = 0.7;
    double bm25_weight = 0.3;
    double bm25_k1 = 1.2;
    double bm25_b = 0.75;
    std::set<std::string> generic_token_stoplist{"java"};
    std::size_t output_top_n = 10;

    void validate() const {
        if (std::abs(sim_weight + bm25_weight - 1.0) > 1e-12)
            throw ConfigError("fusion weights must sum to 1 (got " + std::to_string(sim_weight + bm25_weight) + ")");
        if (sim_weight < 0 || bm25_weight < 0) throw ConfigError("fusion weights must be non-negative");
        if (!(bm25_k1 > 0)) throw ConfigError("bm25_k1 must be positive");
        if (!(bm25_b >= 0 && bm25_b <= 1)) throw ConfigError("bm25_b must lie in [0, 1]");
        if (output_top_n == 0) throw ConfigError("output_top_n must be positive");
    }
};

enum class CandidateSource { retrieval, cwe_expansion };

inline std::string_view to_string(CandidateSource s) {
    return s == CandidateSource::retrieval ? "retrieval" : "cwe_expansion";
}

struct RankedCve {
    std::string cve_id;
    double sim_score = 0.0;
    double bm25_score = 0.0;
    double norm_sim = 0.0;
    double norm_bm25 = 0.0;
    double final_score = 0.0;
    CandidateSource source = CandidateSource::retrieval;

    friend bool operator==(const RankedCve&, const RankedCve&) = default;
};

inline bool ranked_order(const RankedCve& a, const RankedCve& b) {
    return index::score_order(a.final_score, a.cve_id, b.final_score, b.cve_id);
}

/// Lowercase alphanumeric tokens with stoplist members removed.
/// "java.io.FileOutputStream" -> ["io", "fileoutputstream"].
inline std::vector<std::string> tokenize(std::string_view text, const std::set<std::string>& stoplist) {
    auto tokens = text::alnum_tokens(text);
    std::erase_if(tokens, [&](const std::string& t) { return stoplist.count(t) != 0; });
    return tokens;
}

inline std::vector<std::string> tokenize(std::string_view text) {
    return tokenize(text, FusionConfig{}.generic_token_stoplist);
}

/// Okapi BM25 over a fixed tokenized corpus:
///   sum_q IDF(q) * f(q,D)(k1+1) / (f(q,D) + k1(1 - b + b|D|/avgdl))
///   IDF(q) = ln(1 + (N - n_q + 0.5) / (n_q + 0.5))
/// Query tokens are summed as given, duplicates included.
class Bm25Corpus {
public:
    Bm25Corpus(std::vector<std::vector<std::string>> docs, double k1 = 1.2, double b = 0.75) : k1_(k1), b_(b) {
        if (docs.empty()) throw PreconditionError("BM25 corpus is empty");
        tf_.resize(docs.size());
        lengths_.resize(docs.size());
        double total = 0.0;
        for (std::size_t i = 0; i < docs.size(); ++i) {
            lengths_[i] = static_cast<double>(docs[i].size());
            total += lengths_[i];
            for (const auto& t : docs[i]) ++tf_[i][t];
            for (const auto& [t, c] : tf_[i]) ++df_[t];
        }
        avgdl_ = total / static_cast<double>(docs.size());
    }

    std::size_t size() const noexcept { return tf_.size(); }
    double avgdl() const noexcept { return avgdl_; }

    double idf(const std::string& term) const {
        auto it = df_.find(term);
        double n_q = it == df_.end() ? 0.0 : static_cast<double>(it->second);
        double N = static_cast<double>(tf_.size());
        return std::log(1.0 + (N - n_q + 0.5) / (n_q + 0.5));
    }

    double score(std::span<const std::string> query, std::size_t doc) const {
        if (doc >= tf_.size()) throw PreconditionError("BM25 doc index out of range");
        const auto& tf = tf_[doc];
        // avgdl is 0 only when every document is empty, in which case no
        // term can match and the score is 0 anyway.
        double len_ratio = avgdl_ > 0 ? lengths_[doc] / avgdl_ : 0.0;
        double s = 0.0;
        for (const auto& q : query) {
            auto it = tf.find(q);
            if (it == tf.end()) continue;
            double f = static_cast<double>(it->second);
            s += idf(q) * f * (k1_ + 1.0) / (f + k1_ * (1.0 - b_ + b_ * len_ratio));
        }
        return s;
    }

private:
    double k1_, b_;
    std::vector<std::unordered_map<std::string, std::size_t>> tf_;
    std::vector<double> lengths_;
    std::unordered_map<std::string, std::size_t> df_;
    double avgdl_ = 0.0;
};

/// Min-max to [0, 1]; a constant list maps to all 1.0.
inline std::vector<double> normalize(std::span<const double> scores) {
    std::vector<double> out(scores.size());
    if (scores.empty()) return out;
    auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
    double min = *lo, max = *hi;
    if (max == min) {
        std::fill(out.begin(), out.end(), 1.0);
        return out;
    }
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = (scores[i] - min) / (max - min);
    return out;
}

/// Combines raw similarity and BM25 scores into ranked candidates:
/// final = sim_weight * norm(sim) + bm25_weight * norm(bm25).
inline std::vector<RankedCve> fuse_scores(std::span<const std::string> ids, std::span<const double> sims,
                                          std::span<const double> bm25s, const FusionConfig& cfg) {
    if (ids.size() != sims.size() || ids.size() != bm25s.size())
        throw PreconditionError("fuse_scores: input lengths differ");
    auto ns = normalize(sims);
    auto nb = normalize(bm25s);
    std::vector<RankedCve> out(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        out[i].cve_id = ids[i];
        out[i].sim_score = sims[i];
        out[i].bm25_score = bm25s[i];
        out[i].norm_sim = ns[i];
        out[i].norm_bm25 = nb[i];
        out[i].final_score = cfg.sim_weight * ns[i] + cfg.bm25_weight * nb[i];
        out[i].source = CandidateSource::retrieval;
    }
    std::sort(out.begin(), out.end(), ranked_order);
    return out;
}

template <typename F>
concept DescriptionLookup = requires(F f, const std::string& id) {
    { f(id) } -> std::convertible_to<std::string_view>;
};

/// Re-ranks aggregated retrieval hits by lexical overlap between the
/// library names and each candidate's description. BM25 statistics are
/// computed over the candidate pool.
template <DescriptionLookup Lookup>
std::vector<RankedCve> fuse(std::span<const index::AggregatedHit> candidates, std::span<const std::string> library_names,
                            Lookup&& description_of, const FusionConfig& cfg) {
    cfg.validate();
    if (candidates.empty()) return {};
    std::vector<std::string> query;
    for (const auto& lib : library_names)
        for (auto& t : tokenize(lib, cfg.generic_token_stoplist)) query.push_back(std::move(t));

    std::vector<std::vector<std::string>> docs;
    docs.reserve(candidates.size());
    for (const auto& c : candidates)
        docs.push_back(tokenize(std::string_view(description_of(c.cve_id)), cfg.generic_token_stoplist));
    Bm25Corpus corpus(std::move(docs), cfg.bm25_k1, cfg.bm25_b);

    std::vector<std::string> ids;
    std::vector<double> sims, bm25s;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        ids.push_back(candidates[i].cve_id);
        sims.push_back(candidates[i].max_similarity);
        bm25s.push_back(corpus.score(query, i));
    }
    return fuse_scores(ids, sims, bm25s, cfg);
}

inline constexpr double kExpansionEpsilon = 1e-6;

/// For each CWE on the top `output_top_n` entries, adds every other KB CVE
/// with that CWE, scored just below the best ranked CVE carrying it. Input
/// entries keep their scores and relative order; the result stays sorted.
inline std::vector<RankedCve> expand_by_cwe(const std::vector<RankedCve>& ranked, const kb::KbSnapshot& kb,
                                            const FusionConfig& cfg) {
    std::unordered_set<std::string> present;
    for (const auto& r : ranked) present.insert(r.cve_id);
    std::set<std::string> seen_cwes;
    std::vector<RankedCve> added;
    std::size_t top = std::min(cfg.output_top_n, ranked.size());
    for (std::size_t i = 0; i < top; ++i) {
        for (const auto& cwe : kb.cwes_of(ranked[i].cve_id)) {
            if (!seen_cwes.insert(cwe).second) continue;
            // Ranked is sorted, so the first carrier of a CWE is its best.
            double inherited = std::max(0.0, ranked[i].final_score - kExpansionEpsilon);
            for (const auto& rec : kb.get_by_cwe(cwe)) {
                if (!present.insert(rec->cve_id).second) continue;
                RankedCve e;
                e.cve_id = rec->cve_id;
                e.final_score = inherited;
                e.source = CandidateSource::cwe_expansion;
                added.push_back(std::move(e));
            }
        }
    }
    if (added.empty()) return ranked;
    std::sort(added.begin(), added.end(), ranked_order);
    std::vector<RankedCve> out;
    out.reserve(ranked.size() + added.size());
    std::merge(ranked.begin(), ranked.end(), added.begin(), added.end(), std::back_inserter(out), ranked_order);
    return out;
}

/// The candidates handed to the prediction prompt: the first `n` retrieval
/// entries, topped up with expansion entries only when fewer than `n`
/// retrieval entries exist.
inline std::vector<RankedCve> prompt_candidates(const std::vector<RankedCve>& ranked, std::size_t n) {
    std::vector<RankedCve> out;
    for (const auto& r : ranked) {
        if (out.size() >= n) break;
        if (r.source == CandidateSource::retrieval) out.push_back(r);
    }
    for (const auto& r : ranked) {
        if (out.size() >= n) break;
        if (r.source == CandidateSource::cwe_expansion) out.push_back(r);
    }
    return out;
}

}  // namespace malcve::rerank
