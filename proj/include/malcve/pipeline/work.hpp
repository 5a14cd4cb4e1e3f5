// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <condition_variable>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>

#include "malcve/errors.hpp"
#include "malcve/util/files.hpp"
#include "malcve/util/text.hpp"

namespace malcve::pipeline {

enum class WorkState { queued_download, downloaded, queued_analysis, analyzing, done, failed, excluded };

inline std::string_view to_string(WorkState s) {
    switch (s) {
        case WorkState::queued_download: return "queued_download";
        case WorkState::downloaded: return "downloaded";
        case WorkState::queued_analysis: return "queued_analysis";
        case WorkState::analyzing: return "analyzing";
        case WorkState::done: return "done";
        case WorkState::failed: return "failed";
        case WorkState::excluded: return "excluded";
    }
    return "?";
}

inline std::optional<WorkState> parse_work_state(std::string_view s) {
    for (auto w : {WorkState::queued_download, WorkState::downloaded, WorkState::queued_analysis, WorkState::analyzing,
                   WorkState::done, WorkState::failed, WorkState::excluded})
        if (to_string(w) == s) return w;
    return std::nullopt;
}

inline bool is_terminal(WorkState s) {
    return s == WorkState::done || s == WorkState::failed || s == WorkState::excluded;
}

/// Moves only forward through the listed order. Local files enter at
/// queued_analysis. Any live state may fail; done and excluded are only
/// reachable from analyzing.
inline bool valid_transition(WorkState from, WorkState to) {
    if (is_terminal(from)) return false;
    if (to == WorkState::failed) return true;
    if (to == WorkState::done || to == WorkState::excluded) return from == WorkState::analyzing;
    return static_cast<int>(to) == static_cast<int>(from) + 1;
}

struct WorkItem {
    std::string key;  ///< manifest entry: a sha256 or a path
    std::string sha256;  ///< known up front for downloads, after hashing for paths
    std::optional<fs::path> path;
    WorkState state = WorkState::queued_analysis;
    int attempts = 0;
    std::size_t order = 0;  ///< position in the manifest

    void move_to(WorkState next) {
        if (!valid_transition(state, next))
            throw PreconditionError("invalid work item transition " + std::string(to_string(state)) + " -> " +
                                    std::string(to_string(next)));
        state = next;
    }
};

/// Unbounded MPMC queue. `pop` blocks until an item arrives or the queue is
/// closed and drained.
template <typename T>
class BlockingQueue {
public:
    void push(T item) {
        {
            std::lock_guard lock(mu_);
            if (closed_) throw PreconditionError("push to a closed queue");
            items_.push_back(std::move(item));
        }
        cv_.notify_one();
    }

    std::optional<T> pop() {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return closed_ || !items_.empty(); });
        if (items_.empty()) return std::nullopt;
        T item = std::move(items_.front());
        items_.pop_front();
        return item;
    }

    void close() {
        {
            std::lock_guard lock(mu_);
            closed_ = true;
        }
        cv_.notify_all();
    }

    std::size_t size() const {
        std::lock_guard lock(mu_);
        return items_.size();
    }

private:
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::deque<T> items_;
    bool closed_ = false;
};

/// Append-only JSON-lines record of state changes, keyed by manifest entry.
/// Reopening replays it so a batch can skip items already finished.
class Journal {
public:
    explicit Journal(fs::path path) : path_(std::move(path)) {
        if (fs::exists(path_)) {
            const auto lines = text::split_lines(read_file(path_));
            std::size_t lineno = 0;
            for (const auto& line : lines) {
                ++lineno;
                if (text::trim(line).empty()) continue;
                try {
                    auto j = nlohmann::json::parse(line);
                    auto st = parse_work_state(j.at("state").get<std::string>());
                    if (!st) throw ParseError("unknown state");
                    auto& e = entries_[j.at("key").get<std::string>()];
                    e.state = *st;
                    e.sha256 = j.value("sha256", e.sha256);
                } catch (const std::exception&) {
                    // A torn final line from an interrupted run is expected; anything else is not.
                    if (lineno != lines.size())
                        throw ParseError("journal " + path_.string() + " line " + std::to_string(lineno) + " is corrupt");
                }
            }
        }
        if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
        // Compact to one line per key so a torn tail never lands mid-file.
        std::string compact;
        for (const auto& [key, e] : entries_)
            compact += nlohmann::ordered_json{{"key", key}, {"sha256", e.sha256}, {"state", to_string(e.state)}}.dump() +
                       "\n";
        write_file_atomic(path_, compact);
        out_.open(path_, std::ios::app | std::ios::binary);
        if (!out_) throw Error("cannot open journal " + path_.string());
    }

    void record(const WorkItem& item) {
        nlohmann::ordered_json j{{"key", item.key}, {"sha256", item.sha256}, {"state", to_string(item.state)}};
        std::lock_guard lock(mu_);
        out_ << j.dump() << '\n';
        out_.flush();
        auto& e = entries_[item.key];
        e.state = item.state;
        e.sha256 = item.sha256;
    }

    struct Entry {
        WorkState state = WorkState::queued_analysis;
        std::string sha256;
    };

    std::optional<Entry> last(const std::string& key) const {
        std::lock_guard lock(mu_);
        auto it = entries_.find(key);
        if (it == entries_.end()) return std::nullopt;
        return it->second;
    }

    const fs::path& path() const noexcept { return path_; }

private:
    fs::path path_;
    mutable std::mutex mu_;
    std::map<std::string, Entry> entries_;
    std::ofstream out_;
};

}  // namespace malcve::pipeline
