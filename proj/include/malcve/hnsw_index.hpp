// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <queue>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "malcve/vector_index.hpp"

namespace malcve::index {

struct HnswParams {
    std::size_t M = 16;                 ///< links per node on upper layers
    std::size_t ef_construction = 200;  ///< beam width while building
    std::size_t ef_search = 128;        ///< beam width while querying (raised to k when smaller)
    std::uint64_t seed = 42;

    void validate() const {
        if (M < 2) throw ConfigError("HNSW M must be at least 2");
        if (ef_construction == 0 || ef_search == 0) throw ConfigError("HNSW ef parameters must be positive");
    }
};

/// Hierarchical navigable small-world graph over cosine distance. Built once
/// (deterministically for a given seed) and then read-only. Candidates found
/// by the graph walk are rescored exactly before ranking, so similarities
/// match the exact engine for every returned hit.
class HnswIndex final : public VectorIndex {
public:
    HnswIndex(StorePtr store, HnswParams params) : store_(std::move(store)), params_(params) {
        params_.validate();
        level_mult_ = 1.0 / std::log(static_cast<double>(params_.M));
        inv_norm_.resize(store_->size());
        for (std::size_t i = 0; i < store_->size(); ++i)
            inv_norm_[i] = store_->norm(i) > 0 ? static_cast<float>(1.0 / store_->norm(i)) : 0.0f;
        build();
    }

    /// Reattaches a previously serialized graph to `store`.
    static std::unique_ptr<HnswIndex> from_blob(StorePtr store, HnswParams params, std::string_view blob) {
        auto idx = std::unique_ptr<HnswIndex>(new HnswIndex(std::move(store), params, nullptr));
        idx->deserialize(blob);
        return idx;
    }

    std::vector<SearchHit> search(std::span<const float> query, std::size_t k, std::size_t query_index) const override {
        check_query(query);
        if (store_->size() == 0 || k == 0) return {};
        std::vector<float> q = normalized(query);
        std::uint32_t cur = entry_;
        float cur_d = distance(q.data(), cur);
        for (int l = max_level_; l > 0; --l) greedy(q.data(), cur, cur_d, l);
        std::vector<char> visited(store_->size(), 0);
        auto found = search_layer(q.data(), cur, std::max(params_.ef_search, k), 0, visited);
        std::vector<std::uint32_t> rows;
        rows.reserve(found.size());
        for (const auto& [d, id] : found) rows.push_back(id);
        return rank_rows(rows, query, k, query_index);
    }

    std::string_view engine() const override { return "hnsw"; }
    const VectorStore& store() const override { return *store_; }
    const HnswParams& params() const noexcept { return params_; }

    /// Little-endian u32 stream: magic, version, count, dim, M, entry,
    /// max_level, then per node its level and each layer's neighbor list.
    std::string serialize() const {
        std::string out;
        auto put = [&](std::uint32_t v) {
            for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
        };
        put(kMagic);
        put(kVersion);
        put(static_cast<std::uint32_t>(store_->size()));
        put(static_cast<std::uint32_t>(store_->dim()));
        put(static_cast<std::uint32_t>(params_.M));
        put(entry_);
        put(static_cast<std::uint32_t>(max_level_ < 0 ? 0 : max_level_));
        for (std::size_t i = 0; i < links_.size(); ++i) {
            put(static_cast<std::uint32_t>(links_[i].size()));
            for (const auto& layer : links_[i]) {
                put(static_cast<std::uint32_t>(layer.size()));
                for (auto n : layer) put(n);
            }
        }
        return out;
    }

private:
    static constexpr std::uint32_t kMagic = 0x4843564D;  // "MVCH"
    static constexpr std::uint32_t kVersion = 1;

    using Scored = std::pair<float, std::uint32_t>;  // (distance, row)

    HnswIndex(StorePtr store, HnswParams params, std::nullptr_t) : store_(std::move(store)), params_(params) {
        params_.validate();
        level_mult_ = 1.0 / std::log(static_cast<double>(params_.M));
        inv_norm_.resize(store_->size());
        for (std::size_t i = 0; i < store_->size(); ++i)
            inv_norm_[i] = store_->norm(i) > 0 ? static_cast<float>(1.0 / store_->norm(i)) : 0.0f;
    }

    std::size_t max_links(int level) const { return level == 0 ? 2 * params_.M : params_.M; }

    std::vector<float> normalized(std::span<const float> v) const {
        double n = std::sqrt(detail::dot_f64(v.data(), v.data(), v.size()));
        std::vector<float> out(v.begin(), v.end());
        if (n > 0)
            for (auto& x : out) x = static_cast<float>(x / n);
        return out;
    }

    /// Cosine distance between a unit query and row i.
    float distance(const float* unit_q, std::uint32_t i) const {
        return 1.0f - detail::dot_f32(unit_q, store_->row(i), store_->dim()) * inv_norm_[i];
    }

    float row_distance(std::uint32_t a, std::uint32_t b) const {
        return 1.0f - detail::dot_f32(store_->row(a), store_->row(b), store_->dim()) * inv_norm_[a] * inv_norm_[b];
    }

    int random_level() {
        double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
        if (u <= 0.0) u = 0x1.0p-53;
        return static_cast<int>(std::floor(-std::log(u) * level_mult_));
    }

    void greedy(const float* q, std::uint32_t& cur, float& cur_d, int level) const {
        for (bool changed = true; changed;) {
            changed = false;
            for (auto n : links_[cur][static_cast<std::size_t>(level)]) {
                float d = distance(q, n);
                if (d < cur_d || (d == cur_d && n < cur)) {
                    cur = n;
                    cur_d = d;
                    changed = true;
                }
            }
        }
    }

    /// Beam search on one layer; result sorted by ascending distance.
    std::vector<Scored> search_layer(const float* q, std::uint32_t start, std::size_t ef, int level,
                                     std::vector<char>& visited) const {
        std::priority_queue<Scored, std::vector<Scored>, std::greater<>> frontier;
        std::priority_queue<Scored> best;
        float d0 = distance(q, start);
        frontier.emplace(d0, start);
        best.emplace(d0, start);
        visited[start] = 1;
        std::vector<std::uint32_t> touched{start};
        while (!frontier.empty()) {
            auto [d, c] = frontier.top();
            if (d > best.top().first && best.size() >= ef) break;
            frontier.pop();
            for (auto n : links_[c][static_cast<std::size_t>(level)]) {
                if (visited[n]) continue;
                visited[n] = 1;
                touched.push_back(n);
                float dn = distance(q, n);
                if (best.size() < ef || dn < best.top().first) {
                    frontier.emplace(dn, n);
                    best.emplace(dn, n);
                    if (best.size() > ef) best.pop();
                }
            }
        }
        for (auto t : touched) visited[t] = 0;
        std::vector<Scored> out;
        out.reserve(best.size());
        while (!best.empty()) {
            out.push_back(best.top());
            best.pop();
        }
        std::reverse(out.begin(), out.end());
        return out;
    }

    /// Keeps a candidate only if it is closer to the base than to every
    /// neighbor already kept, which spreads links across directions.
    std::vector<std::uint32_t> select_neighbors(const std::vector<Scored>& sorted, std::size_t m) const {
        std::vector<std::uint32_t> kept;
        for (const auto& [d, c] : sorted) {
            if (kept.size() >= m) break;
            bool good = true;
            for (auto k : kept) {
                if (row_distance(c, k) < d) {
                    good = false;
                    break;
                }
            }
            if (good) kept.push_back(c);
        }
        return kept;
    }

    void build() {
        const std::size_t n = store_->size();
        rng_.seed(params_.seed);
        links_.assign(n, {});
        max_level_ = -1;
        entry_ = 0;
        std::vector<char> visited(n, 0);
        for (std::uint32_t i = 0; i < n; ++i) insert(i, visited);
    }

    void insert(std::uint32_t i, std::vector<char>& visited) {
        int level = random_level();
        links_[i].assign(static_cast<std::size_t>(level) + 1, {});
        if (max_level_ < 0) {
            entry_ = i;
            max_level_ = level;
            return;
        }
        std::vector<float> q(store_->row(i), store_->row(i) + store_->dim());
        for (auto& x : q) x *= inv_norm_[i];

        std::uint32_t cur = entry_;
        float cur_d = distance(q.data(), cur);
        for (int l = max_level_; l > level; --l) greedy(q.data(), cur, cur_d, l);

        for (int l = std::min(level, max_level_); l >= 0; --l) {
            auto cand = search_layer(q.data(), cur, params_.ef_construction, l, visited);
            auto neighbors = select_neighbors(cand, params_.M);
            auto& mine = links_[i][static_cast<std::size_t>(l)];
            mine = neighbors;
            for (auto nb : neighbors) {
                auto& theirs = links_[nb][static_cast<std::size_t>(l)];
                theirs.push_back(i);
                if (theirs.size() > max_links(l)) {
                    std::vector<Scored> scored;
                    scored.reserve(theirs.size());
                    for (auto t : theirs) scored.emplace_back(row_distance(nb, t), t);
                    std::sort(scored.begin(), scored.end());
                    theirs = select_neighbors(scored, max_links(l));
                }
            }
            cur = cand.front().second;
        }
        if (level > max_level_) {
            max_level_ = level;
            entry_ = i;
        }
    }

    void deserialize(std::string_view blob) {
        std::size_t pos = 0;
        auto get = [&]() -> std::uint32_t {
            if (pos + 4 > blob.size()) throw ParseError("HNSW blob truncated");
            std::uint32_t v = 0;
            for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[pos + i])) << (8 * i);
            pos += 4;
            return v;
        };
        if (get() != kMagic) throw ParseError("not an HNSW blob");
        if (get() != kVersion) throw ParseError("unsupported HNSW blob version");
        auto n = get();
        auto dim = get();
        auto m = get();
        if (n != store_->size()) throw ParseError("HNSW blob has " + std::to_string(n) + " nodes, store has " +
                                                  std::to_string(store_->size()));
        if (dim != store_->dim()) throw DimensionMismatch(store_->dim(), dim);
        if (m != params_.M) throw ParseError("HNSW blob built with M=" + std::to_string(m));
        entry_ = get();
        max_level_ = static_cast<int>(get());
        if (n == 0) max_level_ = -1;
        links_.assign(n, {});
        for (std::uint32_t i = 0; i < n; ++i) {
            auto levels = get();
            links_[i].resize(levels);
            for (auto& layer : links_[i]) {
                auto cnt = get();
                layer.resize(cnt);
                for (auto& x : layer) {
                    x = get();
                    if (x >= n) throw ParseError("HNSW blob has an out-of-range link");
                }
            }
        }
        if (n > 0 && entry_ >= n) throw ParseError("HNSW blob entry point out of range");
    }

    StorePtr store_;
    HnswParams params_;
    double level_mult_ = 0.0;
    std::vector<float> inv_norm_;
    std::vector<std::vector<std::vector<std::uint32_t>>> links_;
    std::uint32_t entry_ = 0;
    int max_level_ = -1;
    std::mt19937_64 rng_;
};

}  // namespace malcve::index
