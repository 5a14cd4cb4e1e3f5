// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <memory>
#include <string>

#include "malcve/cve_kb.hpp"
#include "malcve/hnsw_index.hpp"
#include "malcve/util/files.hpp"
#include "malcve/util/sha256.hpp"
#include "malcve/vector_index.hpp"

namespace malcve::index {

struct IndexConfig {
    std::string engine = "hnsw";  ///< "exact" or "hnsw"
    HnswParams hnsw{};
    std::size_t k = 100;  ///< hits per query

    void validate() const {
        if (engine != "exact" && engine != "hnsw") throw ConfigError("unknown index engine: " + engine);
        if (k == 0) throw ConfigError("index k must be positive");
        hnsw.validate();
    }
};

inline std::unique_ptr<VectorIndex> build_index(const IndexConfig& cfg, StorePtr store) {
    cfg.validate();
    if (cfg.engine == "exact") return std::make_unique<ExactIndex>(std::move(store));
    return std::make_unique<HnswIndex>(std::move(store), cfg.hnsw);
}

/// Digest of the row order, so a graph is never attached to a store whose
/// rows moved.
inline std::string ids_fingerprint(const VectorStore& store) {
    Sha256 h;
    for (const auto& id : store.ids()) h.update(id).update("\n");
    return h.hex();
}

/// Writes `index.meta.json` and, for graph engines, `index.hnsw.bin`.
inline void save_index(const VectorIndex& idx, const fs::path& dir) {
    nlohmann::ordered_json meta;
    meta["engine"] = std::string(idx.engine());
    meta["embedding_dim"] = idx.dim();
    meta["record_count"] = idx.size();
    meta["ids_sha256"] = ids_fingerprint(idx.store());
    if (const auto* h = dynamic_cast<const HnswIndex*>(&idx)) {
        meta["params"] = {{"M", h->params().M},
                          {"ef_construction", h->params().ef_construction},
                          {"ef_search", h->params().ef_search},
                          {"seed", h->params().seed}};
        meta["blob"] = "index.hnsw.bin";
        write_file_atomic(dir / "index.hnsw.bin", h->serialize());
    } else {
        meta["blob"] = nullptr;
    }
    write_file_atomic(dir / "index.meta.json", meta.dump(2) + "\n");
}

/// Loads the persisted index for `snap`, verifying dimension and record
/// count against the KB manifest. Throws ParseError on any mismatch.
inline std::unique_ptr<VectorIndex> load_index(const fs::path& dir, const kb::SnapshotPtr& snap,
                                               std::size_t ef_search_override = 0) {
    if (!fs::exists(dir / "index.meta.json")) throw ParseError("no index at " + dir.string());
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(read_file(dir / "index.meta.json"));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("index.meta.json: ") + e.what());
    }
    const auto& m = snap->manifest();
    if (meta.value("embedding_dim", std::size_t{0}) != m.embedding_dim)
        throw ParseError("index dimension " + std::to_string(meta.value("embedding_dim", 0)) +
                         " does not match KB dimension " + std::to_string(m.embedding_dim));
    if (meta.value("record_count", std::size_t{0}) != m.record_count)
        throw ParseError("index covers " + std::to_string(meta.value("record_count", 0)) + " records, KB has " +
                         std::to_string(m.record_count));
    auto store = VectorStore::from_snapshot(snap);
    if (meta.value("ids_sha256", "") != ids_fingerprint(*store)) throw ParseError("index row order is stale");
    auto engine = meta.value("engine", "");
    if (engine == "exact") return std::make_unique<ExactIndex>(store);
    if (engine == "hnsw") {
        HnswParams p;
        const auto& jp = meta.at("params");
        p.M = jp.at("M").get<std::size_t>();
        p.ef_construction = jp.at("ef_construction").get<std::size_t>();
        p.ef_search = ef_search_override ? ef_search_override : jp.at("ef_search").get<std::size_t>();
        p.seed = jp.at("seed").get<std::uint64_t>();
        return HnswIndex::from_blob(store, p, read_file(dir / meta.at("blob").get<std::string>()));
    }
    throw ParseError("unknown index engine in meta: " + engine);
}

}  // namespace malcve::index
