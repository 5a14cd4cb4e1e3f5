// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "malcve/embeddings.hpp"
#include "malcve/errors.hpp"
#include "malcve/util/clock.hpp"
#include "malcve/util/files.hpp"
#include "malcve/util/text.hpp"

namespace malcve::kb {

/// One NVD vulnerability as stored in the knowledge base.
struct CveRecord {
    std::string cve_id;
    std::string description;
    embed::Vector description_vector;
    std::vector<std::string> cwe_ids;
    std::string cvss_vector;
    std::optional<double> cvss_score;

    bool has_cwe(std::string_view cwe) const {
        return std::find(cwe_ids.begin(), cwe_ids.end(), cwe) != cwe_ids.end();
    }
    friend bool operator==(const CveRecord&, const CveRecord&) = default;
};

using RecordPtr = std::shared_ptr<const CveRecord>;

struct KbManifest {
    std::size_t record_count = 0;
    std::string embedding_model_id;
    std::size_t embedding_dim = 0;
    TimePoint last_refresh{};
    std::string source_feed_version;

    nlohmann::ordered_json to_json() const {
        return {{"record_count", record_count},
                {"embedding_model_id", embedding_model_id},
                {"embedding_dim", embedding_dim},
                {"last_refresh", format_utc(last_refresh)},
                {"source_feed_version", source_feed_version}};
    }
    static KbManifest from_json(const nlohmann::json& j) {
        KbManifest m;
        try {
            m.record_count = j.at("record_count").get<std::size_t>();
            m.embedding_model_id = j.at("embedding_model_id").get<std::string>();
            m.embedding_dim = j.at("embedding_dim").get<std::size_t>();
            m.last_refresh = parse_utc_or_throw(j.at("last_refresh").get<std::string>());
            m.source_feed_version = j.value("source_feed_version", "");
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("invalid KB manifest: ") + e.what());
        }
        if (m.embedding_dim == 0) throw ParseError("invalid KB manifest: embedding_dim must be positive");
        return m;
    }
};

struct SkipNote {
    std::string cve_id;
    std::string reason;
};

struct IngestStats {
    std::size_t inserted = 0;
    std::size_t updated = 0;
    std::size_t skipped = 0;
    /// Reasons for skips other than "already present and unchanged".
    std::vector<SkipNote> notes;

    friend bool operator==(const IngestStats& a, const IngestStats& b) {
        return a.inserted == b.inserted && a.updated == b.updated && a.skipped == b.skipped;
    }
};

// ---------------------------------------------------------------------------
// NVD CVE API 2.0 feed parsing

struct NvdEntry {
    std::string cve_id;
    std::optional<std::string> description;  ///< first English description
    std::vector<std::string> cwe_ids;
    std::string cvss_vector;
    std::optional<double> cvss_score;
    bool rejected = false;
};

struct FeedMeta {
    std::string version;
    std::optional<TimePoint> timestamp;
    std::size_t total_results = 0;
    std::size_t start_index = 0;
    std::size_t results_per_page = 0;
};

struct ParsedFeed {
    std::vector<NvdEntry> entries;
    FeedMeta meta;
};

namespace detail {

inline void pick_cvss(const nlohmann::json& metrics, NvdEntry& e, std::size_t index) {
    // v3.1 first, then the highest remaining version.
    static constexpr const char* order[] = {"cvssMetricV31", "cvssMetricV40", "cvssMetricV30",
                                            "cvssMetricV2"};
    for (const char* key : order) {
        auto it = metrics.find(key);
        if (it == metrics.end() || !it->is_array() || it->empty()) continue;
        const nlohmann::json* chosen = &(*it)[0];
        for (const auto& m : *it) {
            if (m.is_object() && m.value("type", "") == "Primary") {
                chosen = &m;
                break;
            }
        }
        if (!chosen->is_object() || !chosen->contains("cvssData")) continue;
        const auto& data = (*chosen)["cvssData"];
        e.cvss_vector = data.value("vectorString", "");
        if (data.contains("baseScore") && data["baseScore"].is_number()) {
            double s = data["baseScore"].get<double>();
            if (!(s >= 0.0 && s <= 10.0))
                throw ParseError("entry " + std::to_string(index) + " (" + e.cve_id +
                                     "): CVSS base score out of range",
                                 static_cast<std::ptrdiff_t>(index));
            e.cvss_score = s;
        }
        return;
    }
}

}  // namespace detail

/// Parses an NVD CVE API 2.0 document. Malformed entries raise ParseError
/// naming the entry index.
inline ParsedFeed parse_nvd_feed(const nlohmann::json& doc) {
    ParsedFeed out;
    if (!doc.is_object() || !doc.contains("vulnerabilities") || !doc["vulnerabilities"].is_array())
        throw ParseError("NVD feed: missing 'vulnerabilities' array");
    out.meta.version = doc.value("version", "");
    if (doc.contains("timestamp") && doc["timestamp"].is_string())
        out.meta.timestamp = parse_utc(doc["timestamp"].get<std::string>());
    out.meta.total_results = doc.value("totalResults", std::size_t{0});
    out.meta.start_index = doc.value("startIndex", std::size_t{0});
    out.meta.results_per_page = doc.value("resultsPerPage", std::size_t{0});

    const auto& vulns = doc["vulnerabilities"];
    out.entries.reserve(vulns.size());
    for (std::size_t i = 0; i < vulns.size(); ++i) {
        const auto& v = vulns[i];
        auto fail = [&](const std::string& why) {
            return ParseError("NVD feed entry " + std::to_string(i) + ": " + why, static_cast<std::ptrdiff_t>(i));
        };
        if (!v.is_object() || !v.contains("cve") || !v["cve"].is_object()) throw fail("missing 'cve' object");
        const auto& cve = v["cve"];
        if (!cve.contains("id") || !cve["id"].is_string()) throw fail("missing 'cve.id'");
        NvdEntry e;
        e.cve_id = cve["id"].get<std::string>();
        if (!text::is_cve_id(e.cve_id)) throw fail("malformed CVE id '" + e.cve_id + "'");
        auto status = cve.value("vulnStatus", "");
        e.rejected = status == "Rejected" || status == "REJECTED";

        if (cve.contains("descriptions")) {
            if (!cve["descriptions"].is_array()) throw fail("'descriptions' is not an array");
            for (const auto& d : cve["descriptions"]) {
                if (!d.is_object()) throw fail("malformed description");
                if (d.value("lang", "") == "en" && d.contains("value") && d["value"].is_string()) {
                    auto value = d["value"].get<std::string>();
                    if (!text::trim(value).empty()) {
                        e.description = std::move(value);
                        break;
                    }
                }
            }
        }
        if (e.description && e.description->rfind("** REJECT **", 0) == 0) e.rejected = true;

        if (cve.contains("weaknesses")) {
            if (!cve["weaknesses"].is_array()) throw fail("'weaknesses' is not an array");
            for (const auto& w : cve["weaknesses"]) {
                if (!w.is_object() || !w.contains("description")) continue;
                for (const auto& d : w["description"]) {
                    if (!d.is_object() || !d.contains("value") || !d["value"].is_string()) continue;
                    auto cwe = d["value"].get<std::string>();
                    // NVD-CWE-Other / NVD-CWE-noinfo are placeholders, not CWEs.
                    if (text::is_cwe_id(cwe) &&
                        std::find(e.cwe_ids.begin(), e.cwe_ids.end(), cwe) == e.cwe_ids.end())
                        e.cwe_ids.push_back(std::move(cwe));
                }
            }
        }
        if (cve.contains("metrics")) {
            if (!cve["metrics"].is_object()) throw fail("'metrics' is not an object");
            detail::pick_cvss(cve["metrics"], e, i);
        }
        out.entries.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Snapshot: immutable view readers share

class KbSnapshot {
public:
    KbSnapshot(std::vector<RecordPtr> records, KbManifest manifest)
        : records_(std::move(records)), manifest_(std::move(manifest)) {
        manifest_.record_count = records_.size();
        for (std::size_t i = 0; i < records_.size(); ++i) {
            by_id_.emplace(records_[i]->cve_id, i);
            for (const auto& cwe : records_[i]->cwe_ids) by_cwe_[cwe].push_back(i);
        }
        for (auto& [cwe, idx] : by_cwe_) {
            std::sort(idx.begin(), idx.end(),
                      [&](std::size_t a, std::size_t b) { return records_[a]->cve_id < records_[b]->cve_id; });
        }
    }

    std::size_t size() const noexcept { return records_.size(); }
    bool empty() const noexcept { return records_.empty(); }
    const KbManifest& manifest() const noexcept { return manifest_; }
    const std::vector<RecordPtr>& records() const noexcept { return records_; }
    const CveRecord& at(std::size_t i) const { return *records_.at(i); }

    const CveRecord* find(std::string_view cve_id) const {
        auto it = by_id_.find(std::string(cve_id));
        return it == by_id_.end() ? nullptr : records_[it->second].get();
    }

    /// Every record listing `cwe_id`, ascending by cve_id.
    std::vector<RecordPtr> get_by_cwe(std::string_view cwe_id) const {
        std::vector<RecordPtr> out;
        auto it = by_cwe_.find(std::string(cwe_id));
        if (it == by_cwe_.end()) return out;
        out.reserve(it->second.size());
        for (auto i : it->second) out.push_back(records_[i]);
        return out;
    }

    std::vector<std::string> cwes_of(std::string_view cve_id) const {
        const auto* r = find(cve_id);
        return r ? r->cwe_ids : std::vector<std::string>{};
    }

private:
    std::vector<RecordPtr> records_;
    KbManifest manifest_;
    std::unordered_map<std::string, std::size_t> by_id_;
    std::map<std::string, std::vector<std::size_t>> by_cwe_;
};

using SnapshotPtr = std::shared_ptr<const KbSnapshot>;

/// Source of NVD deltas for refresh.
class NvdClient {
public:
    virtual ~NvdClient() = default;
    /// All entries modified in [since, until]. Throws RefreshError once the
    /// client's retry policy is exhausted.
    virtual std::vector<NvdEntry> fetch_modified(TimePoint since, TimePoint until) = 0;
};

// ---------------------------------------------------------------------------
// Persistence helpers

namespace detail {

inline nlohmann::ordered_json record_line(const CveRecord& r) {
    nlohmann::ordered_json j;
    j["cve_id"] = r.cve_id;
    j["description"] = r.description;
    j["cwe_ids"] = r.cwe_ids;
    j["cvss_vector"] = r.cvss_vector;
    j["cvss_score"] = r.cvss_score ? nlohmann::ordered_json(*r.cvss_score) : nlohmann::ordered_json(nullptr);
    return j;
}

inline void append_f32_le(std::string& out, float f) {
    auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline float read_f32_le(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return std::bit_cast<float>(bits);
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// The CVE knowledge base. Single writer (ingest/refresh serialize on an
/// internal lease), many readers: `snapshot()` hands out an immutable view
/// that stays consistent while a writer publishes the next one.
class KnowledgeBase {
public:
    KnowledgeBase(std::size_t embedding_dim, std::string embedding_model_id) {
        if (embedding_dim == 0) throw ConfigError("embedding dim must be positive");
        KbManifest m;
        m.embedding_dim = embedding_dim;
        m.embedding_model_id = std::move(embedding_model_id);
        snapshot_ = std::make_shared<const KbSnapshot>(std::vector<RecordPtr>{}, m);
    }

    explicit KnowledgeBase(SnapshotPtr snap) : snapshot_(std::move(snap)) {}

    SnapshotPtr snapshot() const {
        std::lock_guard lock(snap_mu_);
        return snapshot_;
    }

    KbManifest manifest() const { return snapshot()->manifest(); }
    std::size_t size() const { return snapshot()->size(); }

    std::vector<RecordPtr> get_by_cwe(std::string_view cwe_id) const { return snapshot()->get_by_cwe(cwe_id); }

    /// Ingests an NVD API 2.0 document.
    IngestStats ingest_feed(const nlohmann::json& feed_document, embed::EmbeddingProvider& embedder) {
        auto parsed = parse_nvd_feed(feed_document);
        return ingest_entries(parsed.entries, embedder, &parsed.meta);
    }

    /// Fetches entries modified since `since` and ingests them. On fetch
    /// failure the KB is left untouched.
    IngestStats refresh(TimePoint since, NvdClient& client, embed::EmbeddingProvider& embedder, Clock& clock) {
        std::lock_guard lease(writer_mu_);
        auto until = clock.now();
        std::vector<NvdEntry> delta;
        try {
            delta = client.fetch_modified(since, until);
        } catch (const RefreshError&) {
            throw;
        } catch (const std::exception& e) {
            throw RefreshError(std::string("refresh failed: ") + e.what());
        }
        return ingest_locked(std::move(delta), embedder, nullptr, until);
    }

    IngestStats ingest_entries(std::vector<NvdEntry> entries, embed::EmbeddingProvider& embedder,
                               const FeedMeta* meta = nullptr) {
        std::lock_guard lease(writer_mu_);
        return ingest_locked(std::move(entries), embedder, meta, std::nullopt);
    }

    // -- persistence -------------------------------------------------------

    /// Writes `manifest.json`, `records.jsonl` and `vectors.bin` (little-endian
    /// f32, row i <-> line i). Output is a pure function of the contents.
    void save(const fs::path& dir) const { save_snapshot(*snapshot(), dir); }

    static void save_snapshot(const KbSnapshot& snap, const fs::path& dir) {
        fs::create_directories(dir);
        std::string lines;
        std::string vectors;
        vectors.reserve(snap.size() * snap.manifest().embedding_dim * 4);
        for (const auto& r : snap.records()) {
            lines += detail::record_line(*r).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
            lines += '\n';
            for (float f : r->description_vector) detail::append_f32_le(vectors, f);
        }
        write_file_atomic(dir / "vectors.bin", vectors);
        write_file_atomic(dir / "records.jsonl", lines);
        // Manifest last: it is the commit marker load() checks counts against.
        write_file_atomic(dir / "manifest.json", snap.manifest().to_json().dump(2) + "\n");
    }

    static KnowledgeBase load(const fs::path& dir) {
        if (!fs::exists(dir / "manifest.json")) throw ConfigError("no knowledge base at " + dir.string());
        KbManifest manifest;
        try {
            manifest = KbManifest::from_json(nlohmann::json::parse(read_file(dir / "manifest.json")));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("KB manifest is not valid JSON: ") + e.what());
        }
        std::string lines = fs::exists(dir / "records.jsonl") ? read_file(dir / "records.jsonl") : "";
        std::string vectors = fs::exists(dir / "vectors.bin") ? read_file(dir / "vectors.bin") : "";
        const std::size_t dim = manifest.embedding_dim;
        if (vectors.size() != manifest.record_count * dim * 4)
            throw ParseError("vectors.bin size " + std::to_string(vectors.size()) + " does not match " +
                             std::to_string(manifest.record_count) + " records of dimension " + std::to_string(dim));

        std::vector<RecordPtr> records;
        records.reserve(manifest.record_count);
        std::unordered_map<std::string, std::size_t> seen;
        std::size_t row = 0;
        for (const auto& line : text::split_lines(lines)) {
            if (text::trim(line).empty()) continue;
            if (row >= manifest.record_count)
                throw ParseError("records.jsonl has more records than the manifest declares");
            CveRecord r;
            try {
                auto j = nlohmann::json::parse(line);
                r.cve_id = j.at("cve_id").get<std::string>();
                r.description = j.at("description").get<std::string>();
                r.cwe_ids = j.at("cwe_ids").get<std::vector<std::string>>();
                r.cvss_vector = j.value("cvss_vector", "");
                if (j.contains("cvss_score") && !j["cvss_score"].is_null())
                    r.cvss_score = j["cvss_score"].get<double>();
            } catch (const nlohmann::json::exception& e) {
                throw ParseError("records.jsonl line " + std::to_string(row + 1) + ": " + e.what(),
                                 static_cast<std::ptrdiff_t>(row));
            }
            if (!text::is_cve_id(r.cve_id))
                throw ParseError("records.jsonl line " + std::to_string(row + 1) + ": bad cve_id",
                                 static_cast<std::ptrdiff_t>(row));
            if (r.cvss_score && !(*r.cvss_score >= 0.0 && *r.cvss_score <= 10.0))
                throw ParseError("records.jsonl line " + std::to_string(row + 1) + ": cvss_score out of range",
                                 static_cast<std::ptrdiff_t>(row));
            if (!seen.emplace(r.cve_id, row).second)
                throw ParseError("duplicate cve_id " + r.cve_id + " in records.jsonl",
                                 static_cast<std::ptrdiff_t>(row));
            r.description_vector.resize(dim);
            const auto* base = reinterpret_cast<const unsigned char*>(vectors.data()) + row * dim * 4;
            for (std::size_t k = 0; k < dim; ++k) r.description_vector[k] = detail::read_f32_le(base + 4 * k);
            records.push_back(std::make_shared<const CveRecord>(std::move(r)));
            ++row;
        }
        if (row != manifest.record_count)
            throw ParseError("manifest declares " + std::to_string(manifest.record_count) + " records, found " +
                             std::to_string(row));
        return KnowledgeBase(std::make_shared<const KbSnapshot>(std::move(records), manifest));
    }

private:
    void check_embedder(const KbManifest& m, const embed::EmbeddingProvider& embedder) const {
        if (embedder.dim() != m.embedding_dim)
            throw ConfigError("embedder dimension " + std::to_string(embedder.dim()) +
                              " does not match knowledge base dimension " + std::to_string(m.embedding_dim));
        if (!m.embedding_model_id.empty() && embedder.model_id() != m.embedding_model_id)
            throw ConfigError("embedder model '" + embedder.model_id() + "' does not match knowledge base model '" +
                              m.embedding_model_id + "'");
    }

    IngestStats ingest_locked(std::vector<NvdEntry> entries, embed::EmbeddingProvider& embedder, const FeedMeta* meta,
                              std::optional<TimePoint> refreshed_at) {
        auto cur = snapshot();
        check_embedder(cur->manifest(), embedder);

        // Later duplicates of the same id win.
        {
            std::unordered_map<std::string, std::size_t> last;
            for (std::size_t i = 0; i < entries.size(); ++i) last[entries[i].cve_id] = i;
            std::vector<NvdEntry> dedup;
            dedup.reserve(last.size());
            for (std::size_t i = 0; i < entries.size(); ++i)
                if (last[entries[i].cve_id] == i) dedup.push_back(std::move(entries[i]));
            entries = std::move(dedup);
        }

        IngestStats stats;
        struct Change {
            const NvdEntry* entry;
            const CveRecord* existing;
            bool embed;
        };
        std::vector<Change> changes;
        for (const auto& e : entries) {
            if (e.rejected) {
                ++stats.skipped;
                stats.notes.push_back({e.cve_id, "rejected"});
                continue;
            }
            if (!e.description) {
                ++stats.skipped;
                stats.notes.push_back({e.cve_id, "no English description"});
                continue;
            }
            const CveRecord* existing = cur->find(e.cve_id);
            if (existing && existing->description == *e.description) {
                if (existing->cwe_ids == e.cwe_ids && existing->cvss_vector == e.cvss_vector &&
                    existing->cvss_score == e.cvss_score) {
                    ++stats.skipped;
                } else {
                    changes.push_back({&e, existing, false});
                }
                continue;
            }
            changes.push_back({&e, existing, true});
        }

        // Embed in chunks; a failing chunk is retried per entry so one bad
        // text only costs its own record.
        std::vector<std::optional<embed::Vector>> vectors(changes.size());
        std::vector<std::size_t> to_embed;
        for (std::size_t i = 0; i < changes.size(); ++i)
            if (changes[i].embed) to_embed.push_back(i);
        constexpr std::size_t chunk = 256;
        for (std::size_t start = 0; start < to_embed.size(); start += chunk) {
            std::size_t n = std::min(chunk, to_embed.size() - start);
            std::vector<std::string> texts;
            for (std::size_t k = 0; k < n; ++k) texts.push_back(*changes[to_embed[start + k]].entry->description);
            try {
                auto out = embedder.embed_batch(texts);
                for (std::size_t k = 0; k < n; ++k) vectors[to_embed[start + k]] = std::move(out[k]);
            } catch (const std::exception&) {
                for (std::size_t k = 0; k < n; ++k) {
                    try {
                        vectors[to_embed[start + k]] = embedder.embed_text(texts[k]);
                    } catch (const std::exception& e) {
                        vectors[to_embed[start + k]].reset();
                        stats.notes.push_back({changes[to_embed[start + k]].entry->cve_id,
                                               std::string("embedding failed: ") + e.what()});
                    }
                }
            }
        }

        std::vector<RecordPtr> records = cur->records();
        std::unordered_map<std::string, std::size_t> pos;
        for (std::size_t i = 0; i < records.size(); ++i) pos.emplace(records[i]->cve_id, i);
        const std::size_t dim = cur->manifest().embedding_dim;
        for (std::size_t i = 0; i < changes.size(); ++i) {
            const auto& c = changes[i];
            CveRecord r;
            r.cve_id = c.entry->cve_id;
            r.description = *c.entry->description;
            r.cwe_ids = c.entry->cwe_ids;
            r.cvss_vector = c.entry->cvss_vector;
            r.cvss_score = c.entry->cvss_score;
            if (c.embed) {
                if (!vectors[i]) {
                    ++stats.skipped;
                    continue;
                }
                if (vectors[i]->size() != dim) throw DimensionMismatch(dim, vectors[i]->size());
                r.description_vector = std::move(*vectors[i]);
            } else {
                r.description_vector = c.existing->description_vector;
            }
            auto ptr = std::make_shared<const CveRecord>(std::move(r));
            if (c.existing) {
                records[pos.at(ptr->cve_id)] = std::move(ptr);
                ++stats.updated;
            } else {
                pos.emplace(ptr->cve_id, records.size());
                records.push_back(std::move(ptr));
                ++stats.inserted;
            }
        }

        KbManifest m = cur->manifest();
        if (m.embedding_model_id.empty()) m.embedding_model_id = embedder.model_id();
        if (meta) {
            if (!meta->version.empty()) m.source_feed_version = meta->version;
            if (meta->timestamp && *meta->timestamp > m.last_refresh) m.last_refresh = *meta->timestamp;
        }
        if (refreshed_at) m.last_refresh = *refreshed_at;
        publish(std::make_shared<const KbSnapshot>(std::move(records), m));
        return stats;
    }

    void publish(SnapshotPtr next) {
        std::lock_guard lock(snap_mu_);
        snapshot_ = std::move(next);
    }

    mutable std::mutex snap_mu_;
    std::mutex writer_mu_;
    SnapshotPtr snapshot_;
};

}  // namespace malcve::kb
