// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "malcve/errors.hpp"
#include "malcve/llm/types.hpp"
#include "malcve/util/files.hpp"
#include "malcve/util/text.hpp"

namespace malcve::eval {

using OrderedJson = nlohmann::ordered_json;

struct GroundTruth {
    std::string file_sha256;
    bool is_malicious = false;
    std::vector<std::string> true_cves;
};

using TruthTable = std::map<std::string, GroundTruth>;

/// `sha256,is_malicious,cve_list` with `;`-separated CVE ids. A header row
/// is optional.
inline TruthTable parse_truth_csv(std::string_view csv) {
    TruthTable out;
    std::size_t lineno = 0;
    for (const auto& raw : text::split_lines(csv)) {
        ++lineno;
        auto line = text::trim(raw);
        if (line.empty() || line.front() == '#') continue;
        auto cols = text::split(line, ',');
        auto where = "truth line " + std::to_string(lineno) + ": ";
        if (cols.size() < 2 || cols.size() > 3) throw ParseError(where + "expected 2 or 3 columns");
        std::string sha = text::to_lower(text::trim(cols[0]));
        if (lineno == 1 && sha == "sha256") continue;
        if (!text::is_hex_digest(sha)) throw ParseError(where + "not a sha256: " + sha);
        GroundTruth g;
        g.file_sha256 = sha;
        auto flag = text::to_lower(text::trim(cols[1]));
        if (flag == "true" || flag == "1") g.is_malicious = true;
        else if (flag == "false" || flag == "0") g.is_malicious = false;
        else throw ParseError(where + "is_malicious must be true/false/1/0");
        if (cols.size() == 3) {
            for (const auto& c : text::split(cols[2], ';')) {
                auto id = std::string(text::trim(c));
                if (id.empty()) continue;
                if (!text::is_cve_id(id)) throw ParseError(where + "not a CVE id: " + id);
                g.true_cves.push_back(std::move(id));
            }
        }
        if (!g.true_cves.empty() && !g.is_malicious) throw ParseError(where + "CVEs listed for a benign sample");
        if (!out.emplace(sha, std::move(g)).second) throw ParseError(where + "duplicate sha256 " + sha);
    }
    return out;
}

inline TruthTable load_truth_csv(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("truth file not found: " + path.string());
    return parse_truth_csv(read_file(path));
}

/// The fields of an analysis report the metrics read.
struct ReportView {
    std::string file_sha256;
    std::optional<llm::Label> verdict;
    std::vector<std::string> candidate_ids;  ///< post-fusion ranking order
    std::optional<std::string> matched_cve;
    std::string model;  ///< prediction model id, used to group runs
};

inline ReportView view_of(const nlohmann::json& report) {
    ReportView v;
    try {
        v.file_sha256 = text::to_lower(report.at("file_sha256").get<std::string>());
        const auto& cs = report.at("code_summary");
        if (cs.is_object()) {
            auto label = cs.at("verdict").at("label").get<std::string>();
            v.verdict = llm::parse_label(label);
            if (!v.verdict) throw ParseError("unknown verdict label in report: " + label);
        }
        for (const auto& c : report.at("candidates")) v.candidate_ids.push_back(c.at("cve_id").get<std::string>());
        const auto& p = report.at("prediction");
        if (p.is_object()) v.matched_cve = p.at("matched_cve").get<std::string>();
        if (report.contains("metadata") && report["metadata"].contains("models"))
            v.model = report["metadata"]["models"].value("predict", "");
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed report: ") + e.what());
    }
    return v;
}

/// Every `*.report.json` under `dir`, ordered by file name.
inline std::vector<ReportView> load_reports(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw ConfigError("reports directory not found: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        auto name = e.path().filename().string();
        if (e.is_regular_file() && name.size() > 12 && name.ends_with(".report.json")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<ReportView> out;
    for (const auto& f : files) {
        try {
            out.push_back(view_of(nlohmann::json::parse(read_file(f))));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(f.string() + ": " + e.what());
        }
    }
    return out;
}

/// A count-based metric; the value is undefined when nothing was counted.
struct Ratio {
    std::size_t numerator = 0;
    std::size_t denominator = 0;

    std::optional<double> value() const {
        if (denominator == 0) return std::nullopt;
        return static_cast<double>(numerator) / static_cast<double>(denominator);
    }

    OrderedJson to_json() const {
        auto v = value();
        return {{"numerator", numerator},
                {"denominator", denominator},
                {"value", v ? OrderedJson(*v) : OrderedJson("undefined")}};
    }

    friend bool operator==(const Ratio&, const Ratio&) = default;
};

inline const std::set<int>& default_ks() {
    static const std::set<int> ks{1, 3, 5, 10};
    return ks;
}

inline void require_truth(const std::vector<ReportView>& reports, const TruthTable& truth) {
    std::vector<std::string> missing;
    for (const auto& r : reports)
        if (!truth.count(r.file_sha256)) missing.push_back(r.file_sha256);
    if (!missing.empty()) throw MissingTruthError(std::move(missing));
}

/// Verdict accuracy over reports that carry a verdict. Malicious and
/// Suspicious both count as a malicious call.
inline Ratio accuracy_rq1(const std::vector<ReportView>& reports, const TruthTable& truth) {
    require_truth(reports, truth);
    Ratio r;
    for (const auto& rep : reports) {
        if (!rep.verdict) continue;
        ++r.denominator;
        bool called_malicious = *rep.verdict != llm::Label::Benign;
        if (called_malicious == truth.at(rep.file_sha256).is_malicious) ++r.numerator;
    }
    return r;
}

/// Fraction of predictions naming one of the sample's true CVEs.
inline Ratio accuracy_rq2(const std::vector<ReportView>& reports, const TruthTable& truth) {
    require_truth(reports, truth);
    Ratio r;
    for (const auto& rep : reports) {
        if (!rep.matched_cve) continue;
        ++r.denominator;
        const auto& t = truth.at(rep.file_sha256).true_cves;
        if (std::find(t.begin(), t.end(), *rep.matched_cve) != t.end()) ++r.numerator;
    }
    return r;
}

/// Malicious samples with a true CVE among the first `k` candidates, over
/// every malicious sample in the truth table. Samples without a report count
/// as misses.
inline Ratio recall_at_k(const std::vector<ReportView>& reports, const TruthTable& truth, int k,
                         const std::set<int>& allowed = default_ks()) {
    if (!allowed.count(k)) throw ConfigError("k=" + std::to_string(k) + " is not in the configured set");
    require_truth(reports, truth);
    std::map<std::string, const ReportView*> by_sha;
    for (const auto& rep : reports) by_sha.emplace(rep.file_sha256, &rep);
    Ratio r;
    for (const auto& [sha, t] : truth) {
        if (!t.is_malicious) continue;
        ++r.denominator;
        auto it = by_sha.find(sha);
        if (it == by_sha.end()) continue;
        const auto& ids = it->second->candidate_ids;
        auto end = ids.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(static_cast<std::size_t>(k), ids.size()));
        for (const auto& cve : t.true_cves) {
            if (std::find(ids.begin(), end, cve) != end) {
                ++r.numerator;
                break;
            }
        }
    }
    return r;
}

inline std::set<int> parse_ks(std::string_view list, const std::set<int>& allowed = default_ks()) {
    std::set<int> out;
    for (const auto& part : text::split(list, ',')) {
        auto s = std::string(text::trim(part));
        if (s.empty()) continue;
        std::size_t used = 0;
        int k = 0;
        try {
            k = std::stoi(s, &used);
        } catch (const std::exception&) {
            throw ConfigError("invalid k: " + s);
        }
        if (used != s.size() || !allowed.count(k)) throw ConfigError("invalid k: " + s);
        out.insert(k);
    }
    if (out.empty()) throw ConfigError("no k values given");
    return out;
}

/// Metrics of one run (one set of reports).
struct RunMetrics {
    std::string model;
    std::size_t n_files = 0;
    Ratio accuracy_rq1;
    Ratio accuracy_rq2;
    std::map<int, Ratio> recall_at;

    OrderedJson to_json() const {
        OrderedJson rec = OrderedJson::object();
        for (const auto& [k, r] : recall_at) rec[std::to_string(k)] = r.to_json();
        return {{"model", model},
                {"n_files", n_files},
                {"accuracy_rq1", accuracy_rq1.to_json()},
                {"accuracy_rq2", accuracy_rq2.to_json()},
                {"recall_at", std::move(rec)}};
    }
};

inline RunMetrics compute_metrics(const std::vector<ReportView>& reports, const TruthTable& truth,
                                  const std::set<int>& ks = default_ks(), std::string model = {}) {
    RunMetrics m;
    if (model.empty()) {
        for (const auto& r : reports) {
            if (!r.model.empty()) {
                model = r.model;
                break;
            }
        }
    }
    m.model = model.empty() ? "unknown" : model;
    m.n_files = reports.size();
    m.accuracy_rq1 = accuracy_rq1(reports, truth);
    m.accuracy_rq2 = accuracy_rq2(reports, truth);
    for (int k : ks) m.recall_at[k] = recall_at_k(reports, truth, k, ks);
    return m;
}

/// Mean, max, min and population standard deviation over the runs where the
/// metric is defined.
struct Stat {
    std::size_t runs = 0;
    double mean = 0, max = 0, min = 0, stddev = 0;

    bool defined() const { return runs > 0; }

    static Stat of(const std::vector<double>& xs) {
        Stat s;
        s.runs = xs.size();
        if (xs.empty()) return s;
        double sum = 0;
        for (double x : xs) sum += x;
        s.mean = sum / static_cast<double>(xs.size());
        s.max = *std::max_element(xs.begin(), xs.end());
        s.min = *std::min_element(xs.begin(), xs.end());
        double sq = 0;
        for (double x : xs) sq += (x - s.mean) * (x - s.mean);
        s.stddev = std::sqrt(sq / static_cast<double>(xs.size()));
        return s;
    }
};

struct MetricRow {
    std::string metric;
    Stat stat;
};

struct ModelBlock {
    std::string model;
    std::size_t runs = 0;
    std::vector<MetricRow> rows;
};

inline constexpr std::string_view kSuspiciousFooter =
    "Suspicious verdicts count as malicious for verdict accuracy.";

struct MetricsTable {
    std::vector<ModelBlock> models;
    std::string footer{kSuspiciousFooter};

    OrderedJson to_json() const {
        OrderedJson ms = OrderedJson::array();
        for (const auto& b : models) {
            OrderedJson rows = OrderedJson::array();
            for (const auto& r : b.rows) {
                OrderedJson row{{"metric", r.metric}, {"runs", r.stat.runs}};
                if (r.stat.defined()) {
                    row["mean"] = r.stat.mean;
                    row["max"] = r.stat.max;
                    row["min"] = r.stat.min;
                    row["stddev"] = r.stat.stddev;
                } else {
                    row["mean"] = row["max"] = row["min"] = row["stddev"] = "undefined";
                }
                rows.push_back(std::move(row));
            }
            ms.push_back({{"model", b.model}, {"runs", b.runs}, {"rows", std::move(rows)}});
        }
        return {{"models", std::move(ms)}, {"footer", footer}};
    }

    static MetricsTable from_json(const nlohmann::json& j) {
        MetricsTable t;
        try {
            t.footer = j.at("footer").get<std::string>();
            for (const auto& b : j.at("models")) {
                ModelBlock mb;
                mb.model = b.at("model").get<std::string>();
                mb.runs = b.at("runs").get<std::size_t>();
                for (const auto& r : b.at("rows")) {
                    MetricRow row;
                    row.metric = r.at("metric").get<std::string>();
                    row.stat.runs = r.at("runs").get<std::size_t>();
                    if (row.stat.defined()) {
                        row.stat.mean = r.at("mean").get<double>();
                        row.stat.max = r.at("max").get<double>();
                        row.stat.min = r.at("min").get<double>();
                        row.stat.stddev = r.at("stddev").get<double>();
                    }
                    mb.rows.push_back(std::move(row));
                }
                t.models.push_back(std::move(mb));
            }
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("malformed metrics table: ") + e.what());
        }
        return t;
    }

    std::string render_text() const {
        auto num = [](double v) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.4f", v);
            return std::string(buf);
        };
        auto pad = [](std::string s, std::size_t w) {
            if (s.size() < w) s.insert(0, w - s.size(), ' ');
            return s;
        };
        std::string out;
        for (const auto& b : models) {
            out += "Model: " + b.model + " (" + std::to_string(b.runs) + (b.runs == 1 ? " run)\n" : " runs)\n");
            std::size_t w0 = 6;
            for (const auto& r : b.rows) w0 = std::max(w0, r.metric.size());
            std::string header = "Metric" + std::string(w0 - 6, ' ');
            for (const char* h : {"Mean", "Max", "Min", "StdDev"}) header += "  " + pad(h, 9);
            out += header + "\n" + std::string(header.size(), '-') + "\n";
            for (const auto& r : b.rows) {
                std::string line = r.metric + std::string(w0 - r.metric.size(), ' ');
                if (r.stat.defined()) {
                    for (double v : {r.stat.mean, r.stat.max, r.stat.min, r.stat.stddev}) line += "  " + pad(num(v), 9);
                } else {
                    for (int i = 0; i < 4; ++i) line += "  " + pad("undefined", 9);
                }
                out += line + "\n";
            }
            out += "\n";
        }
        out += footer + "\n";
        return out;
    }
};

/// Groups runs by model (first-seen order) and summarizes each metric.
inline MetricsTable emit_table(const std::vector<RunMetrics>& runs) {
    if (runs.empty()) throw PreconditionError("metrics table needs at least one run");
    MetricsTable t;
    std::vector<std::string> order;
    std::map<std::string, std::vector<const RunMetrics*>> by_model;
    for (const auto& r : runs) {
        if (!by_model.count(r.model)) order.push_back(r.model);
        by_model[r.model].push_back(&r);
    }
    for (const auto& model : order) {
        const auto& rs = by_model[model];
        ModelBlock b;
        b.model = model;
        b.runs = rs.size();
        auto row = [&](std::string name, auto get) {
            std::vector<double> xs;
            for (const auto* r : rs)
                if (auto v = get(*r)) xs.push_back(*v);
            b.rows.push_back({std::move(name), Stat::of(xs)});
        };
        row("Accuracy (verdict)", [](const RunMetrics& r) { return r.accuracy_rq1.value(); });
        row("Accuracy (CVE)", [](const RunMetrics& r) { return r.accuracy_rq2.value(); });
        std::set<int> ks;
        for (const auto* r : rs)
            for (const auto& [k, _] : r->recall_at) ks.insert(k);
        for (int k : ks)
            row("Recall@" + std::to_string(k), [k](const RunMetrics& r) -> std::optional<double> {
                auto it = r.recall_at.find(k);
                return it == r.recall_at.end() ? std::nullopt : it->second.value();
            });
        t.models.push_back(std::move(b));
    }
    return t;
}

}  // namespace malcve::eval
