// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "malcve/cve_kb.hpp"
#include "malcve/embeddings.hpp"
#include "malcve/errors.hpp"

namespace malcve::index {

/// One neighbor returned by a single query.
struct SearchHit {
    std::string cve_id;
    double similarity = 0.0;  ///< cosine similarity
    std::size_t query_index = 0;

    friend bool operator==(const SearchHit&, const SearchHit&) = default;
};

/// A CVE after merging the hit lists of all queries.
struct AggregatedHit {
    std::string cve_id;
    double max_similarity = 0.0;
    std::vector<std::size_t> contributing_queries;  ///< ascending, unique

    friend bool operator==(const AggregatedHit&, const AggregatedHit&) = default;
};

/// Descending score, then ascending id. The single ordering used for every
/// ranked list in the pipeline.
inline bool score_order(double sa, const std::string& ia, double sb, const std::string& ib) {
    if (sa != sb) return sa > sb;
    return ia < ib;
}

// ---------------------------------------------------------------------------

namespace detail {

inline float dot_f32(const float* a, const float* b, std::size_t n) {
    float s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

inline double dot_f64(const float* a, const float* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
}

}  // namespace detail

/// Row-addressable view of the vectors an index searches over. Either backed
/// by a KB snapshot (no copy) or by rows it owns.
class VectorStore {
public:
    static std::shared_ptr<const VectorStore> from_snapshot(kb::SnapshotPtr snap) {
        auto s = std::shared_ptr<VectorStore>(new VectorStore());
        s->dim_ = snap->manifest().embedding_dim;
        s->snapshot_ = snap;
        for (const auto& r : snap->records()) {
            if (r->description_vector.size() != s->dim_) throw DimensionMismatch(s->dim_, r->description_vector.size());
            s->ids_.push_back(r->cve_id);
            s->rows_.push_back(r->description_vector.data());
        }
        s->compute_norms();
        return s;
    }

    static std::shared_ptr<const VectorStore> from_rows(std::vector<std::string> ids, std::vector<embed::Vector> rows,
                                                        std::size_t dim) {
        if (ids.size() != rows.size()) throw PreconditionError("ids and rows differ in length");
        auto s = std::shared_ptr<VectorStore>(new VectorStore());
        s->dim_ = dim;
        s->ids_ = std::move(ids);
        s->owned_ = std::move(rows);
        for (const auto& r : s->owned_) {
            if (r.size() != dim) throw DimensionMismatch(dim, r.size());
            s->rows_.push_back(r.data());
        }
        s->compute_norms();
        return s;
    }

    std::size_t size() const noexcept { return ids_.size(); }
    std::size_t dim() const noexcept { return dim_; }
    const std::string& id(std::size_t i) const { return ids_[i]; }
    const std::vector<std::string>& ids() const noexcept { return ids_; }
    const float* row(std::size_t i) const { return rows_[i]; }
    double norm(std::size_t i) const { return norms_[i]; }

    /// Cosine similarity of row i against `q` (with precomputed norm).
    double cosine(std::size_t i, const float* q, double q_norm) const {
        if (norms_[i] == 0.0 || q_norm == 0.0) return 0.0;
        return detail::dot_f64(rows_[i], q, dim_) / (norms_[i] * q_norm);
    }

private:
    VectorStore() = default;

    void compute_norms() {
        norms_.resize(rows_.size());
        for (std::size_t i = 0; i < rows_.size(); ++i) norms_[i] = std::sqrt(detail::dot_f64(rows_[i], rows_[i], dim_));
    }

    std::size_t dim_ = 0;
    kb::SnapshotPtr snapshot_;
    std::vector<embed::Vector> owned_;
    std::vector<std::string> ids_;
    std::vector<const float*> rows_;
    std::vector<double> norms_;
};

using StorePtr = std::shared_ptr<const VectorStore>;

/// Nearest-neighbor search by cosine similarity. Immutable after
/// construction; `search` may be called concurrently.
class VectorIndex {
public:
    virtual ~VectorIndex() = default;

    /// Up to `k` hits, best first, ties by ascending cve_id. `query_index`
    /// is stamped onto every hit.
    virtual std::vector<SearchHit> search(std::span<const float> query, std::size_t k = 100,
                                          std::size_t query_index = 0) const = 0;
    virtual std::string_view engine() const = 0;
    virtual const VectorStore& store() const = 0;

    std::size_t dim() const { return store().dim(); }
    std::size_t size() const { return store().size(); }

protected:
    void check_query(std::span<const float> q) const {
        if (q.size() != dim()) throw DimensionMismatch(dim(), q.size());
    }

    /// Rescores `rows` exactly and returns the best `k` in canonical order.
    std::vector<SearchHit> rank_rows(const std::vector<std::uint32_t>& rows, std::span<const float> q, std::size_t k,
                                     std::size_t query_index) const {
        const auto& s = store();
        double qn = std::sqrt(detail::dot_f64(q.data(), q.data(), q.size()));
        std::vector<SearchHit> hits;
        hits.reserve(rows.size());
        for (auto r : rows) hits.push_back({s.id(r), s.cosine(r, q.data(), qn), query_index});
        auto cmp = [](const SearchHit& a, const SearchHit& b) {
            return score_order(a.similarity, a.cve_id, b.similarity, b.cve_id);
        };
        k = std::min(k, hits.size());
        std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), cmp);
        hits.resize(k);
        return hits;
    }
};

/// Brute-force scan with partial sort. Exact, and the oracle for the ANN
/// engine.
class ExactIndex final : public VectorIndex {
public:
    explicit ExactIndex(StorePtr store) : store_(std::move(store)) {}

    std::vector<SearchHit> search(std::span<const float> query, std::size_t k, std::size_t query_index) const override {
        check_query(query);
        std::vector<std::uint32_t> all(store_->size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::uint32_t>(i);
        return rank_rows(all, query, k, query_index);
    }

    std::string_view engine() const override { return "exact"; }
    const VectorStore& store() const override { return *store_; }

private:
    StorePtr store_;
};

// ---------------------------------------------------------------------------
// Aggregation across queries

namespace detail {

inline std::vector<AggregatedHit> finish(std::map<std::string, AggregatedHit> by_id) {
    std::vector<AggregatedHit> out;
    out.reserve(by_id.size());
    for (auto& [id, h] : by_id) {
        std::sort(h.contributing_queries.begin(), h.contributing_queries.end());
        h.contributing_queries.erase(std::unique(h.contributing_queries.begin(), h.contributing_queries.end()),
                                     h.contributing_queries.end());
        out.push_back(std::move(h));
    }
    std::sort(out.begin(), out.end(), [](const AggregatedHit& a, const AggregatedHit& b) {
        return score_order(a.max_similarity, a.cve_id, b.max_similarity, b.cve_id);
    });
    return out;
}

}  // namespace detail

/// Merges per-query hit lists into one entry per CVE carrying its best
/// similarity and every query that retrieved it.
inline std::vector<AggregatedHit> aggregate_max(const std::vector<std::vector<SearchHit>>& hits_per_query) {
    std::map<std::string, AggregatedHit> by_id;
    for (const auto& list : hits_per_query) {
        for (const auto& h : list) {
            auto [it, fresh] = by_id.try_emplace(h.cve_id, AggregatedHit{h.cve_id, h.similarity, {}});
            if (!fresh) it->second.max_similarity = std::max(it->second.max_similarity, h.similarity);
            it->second.contributing_queries.push_back(h.query_index);
        }
    }
    return detail::finish(std::move(by_id));
}

/// Same merge over already-aggregated lists (union of contributing queries).
inline std::vector<AggregatedHit> aggregate_max(const std::vector<std::vector<AggregatedHit>>& lists) {
    std::map<std::string, AggregatedHit> by_id;
    for (const auto& list : lists) {
        for (const auto& h : list) {
            auto [it, fresh] = by_id.try_emplace(h.cve_id, h);
            if (!fresh) {
                it->second.max_similarity = std::max(it->second.max_similarity, h.max_similarity);
                it->second.contributing_queries.insert(it->second.contributing_queries.end(),
                                                       h.contributing_queries.begin(), h.contributing_queries.end());
            }
        }
    }
    return detail::finish(std::move(by_id));
}

}  // namespace malcve::index
