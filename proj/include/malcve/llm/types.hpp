// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "malcve/errors.hpp"
#include "malcve/util/text.hpp"

namespace malcve::llm {

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;

enum class Label { Benign, Suspicious, Malicious };

inline std::string_view to_string(Label l) {
    switch (l) {
        case Label::Benign: return "Benign";
        case Label::Suspicious: return "Suspicious";
        case Label::Malicious: return "Malicious";
    }
    return "?";
}

inline std::optional<Label> parse_label(std::string_view s) {
    if (s == "Benign") return Label::Benign;
    if (s == "Suspicious") return Label::Suspicious;
    if (s == "Malicious") return Label::Malicious;
    return std::nullopt;
}

struct Verdict {
    Label label = Label::Benign;
    std::optional<double> confidence;
    std::string rationale;

    friend bool operator==(const Verdict&, const Verdict&) = default;
};

struct IndicatorsOfCompromise {
    std::vector<std::string> urls;
    std::vector<std::string> created_files;
    std::vector<std::string> registry_entries;
    std::vector<std::string> mutex;
    std::vector<std::string> network_activity;

    friend bool operator==(const IndicatorsOfCompromise&, const IndicatorsOfCompromise&) = default;
};

struct CveSearchQueries {
    std::string status;
    std::string message;
    std::vector<std::string> keywords;

    friend bool operator==(const CveSearchQueries&, const CveSearchQueries&) = default;
};

struct CodeSummary {
    Verdict verdict;
    std::string summary;
    std::vector<std::string> activities;
    IndicatorsOfCompromise indicators_of_compromise;
    std::vector<std::string> libraries_used;
    CveSearchQueries cve_search_queries;
    std::optional<std::vector<std::string>> threat_mapping;

    friend bool operator==(const CodeSummary&, const CodeSummary&) = default;
};

inline constexpr std::string_view kNoMatch = "NONE";

struct CvePrediction {
    std::string behavior_explanation;
    std::string matched_cve;  ///< a candidate id or "NONE"
    std::string justification;

    friend bool operator==(const CvePrediction&, const CvePrediction&) = default;
};

// ---------------------------------------------------------------------------
// Validation. Each parser collects every problem it finds, so a repair
// reprompt can name them all at once.

namespace detail {

class Checker {
public:
    std::vector<std::string> errors;

    const Json* field(const Json& obj, const std::string& path, const char* key) {
        if (!obj.contains(key)) {
            errors.push_back(path + key + ": missing");
            return nullptr;
        }
        return &obj[key];
    }

    std::string str(const Json& obj, const std::string& path, const char* key) {
        const Json* v = field(obj, path, key);
        if (!v) return {};
        if (!v->is_string()) {
            errors.push_back(path + key + ": expected a string");
            return {};
        }
        return v->get<std::string>();
    }

    std::vector<std::string> str_list(const Json& obj, const std::string& path, const char* key) {
        const Json* v = field(obj, path, key);
        if (!v) return {};
        return str_list_value(*v, path + key);
    }

    std::vector<std::string> str_list_value(const Json& v, const std::string& where) {
        std::vector<std::string> out;
        if (!v.is_array()) {
            errors.push_back(where + ": expected a list of strings");
            return out;
        }
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_string()) {
                errors.push_back(where + "[" + std::to_string(i) + "]: expected a string");
                continue;
            }
            out.push_back(v[i].get<std::string>());
        }
        return out;
    }

    const Json* object(const Json& obj, const std::string& path, const char* key) {
        const Json* v = field(obj, path, key);
        if (v && !v->is_object()) {
            errors.push_back(path + key + ": expected an object");
            return nullptr;
        }
        return v;
    }

    std::string joined() const {
        std::string s;
        for (const auto& e : errors) s += (s.empty() ? "" : "; ") + e;
        return s;
    }
};

}  // namespace detail

/// Removes a surrounding markdown code fence, if any.
inline std::string strip_code_fence(std::string_view raw) {
    auto t = text::trim(raw);
    if (t.substr(0, 3) != "```") return std::string(t);
    auto first_nl = t.find('\n');
    if (first_nl == std::string_view::npos) return std::string(t);
    auto body = t.substr(first_nl + 1);
    auto close = body.rfind("```");
    if (close != std::string_view::npos) body = body.substr(0, close);
    return std::string(text::trim(body));
}

template <typename T>
struct Validated {
    std::optional<T> value;
    std::string error;  ///< empty on success
};

inline Validated<Json> parse_json_response(std::string_view raw) {
    try {
        return {Json::parse(strip_code_fence(raw)), {}};
    } catch (const Json::exception& e) {
        return {std::nullopt, std::string("response is not valid JSON: ") + e.what()};
    }
}

/// Accepts `"verdict": "Malicious"` or
/// `"verdict": {"label": ..., "confidence": ..., "rationale": ...}`.
inline Verdict parse_verdict(const Json& v, detail::Checker& c) {
    Verdict out;
    std::string label;
    if (v.is_string()) {
        label = v.get<std::string>();
    } else if (v.is_object()) {
        label = c.str(v, "verdict.", "label");
        if (v.contains("confidence") && !v["confidence"].is_null()) {
            const auto& conf = v["confidence"];
            if (!conf.is_number() || conf.get<double>() < 0.0 || conf.get<double>() > 1.0)
                c.errors.push_back("verdict.confidence: expected a number in [0, 1]");
            else
                out.confidence = conf.get<double>();
        }
        if (v.contains("rationale")) out.rationale = c.str(v, "verdict.", "rationale");
    } else {
        c.errors.push_back("verdict: expected a string or an object");
        return out;
    }
    const bool already_reported = v.is_object() && (!v.contains("label") || !v["label"].is_string());
    if (auto l = parse_label(label)) out.label = *l;
    else if (!already_reported)
        c.errors.push_back("verdict.label: \"" + label + "\" is not one of Benign, Suspicious, Malicious");
    return out;
}

inline Validated<CodeSummary> validate_summary(const Json& j) {
    detail::Checker c;
    CodeSummary s;
    if (!j.is_object()) return {std::nullopt, "summary: expected a JSON object"};
    if (const Json* v = c.field(j, "", "verdict")) s.verdict = parse_verdict(*v, c);
    s.summary = c.str(j, "", "summary");
    s.activities = c.str_list(j, "", "activities");
    if (const Json* ioc = c.object(j, "", "indicators_of_compromise")) {
        const std::string p = "indicators_of_compromise.";
        auto& i = s.indicators_of_compromise;
        i.urls = c.str_list(*ioc, p, "urls");
        i.created_files = c.str_list(*ioc, p, "created_files");
        i.registry_entries = c.str_list(*ioc, p, "registry_entries");
        i.mutex = c.str_list(*ioc, p, "mutex");
        i.network_activity = c.str_list(*ioc, p, "network_activity");
    }
    s.libraries_used = c.str_list(j, "", "libraries_used");
    if (const Json* q = c.object(j, "", "cve_search_queries")) {
        const std::string p = "cve_search_queries.";
        s.cve_search_queries.status = c.str(*q, p, "status");
        s.cve_search_queries.message = c.str(*q, p, "message");
        s.cve_search_queries.keywords = c.str_list(*q, p, "keywords");
    }
    if (j.contains("threat_mapping") && !j["threat_mapping"].is_null())
        s.threat_mapping = c.str_list_value(j["threat_mapping"], "threat_mapping");
    if (c.errors.empty() && s.verdict.label != Label::Benign && s.cve_search_queries.keywords.empty())
        c.errors.push_back("cve_search_queries.keywords: must not be empty for a " +
                           std::string(to_string(s.verdict.label)) + " verdict");
    if (!c.errors.empty()) return {std::nullopt, c.joined()};
    return {std::move(s), {}};
}

/// `candidates` are the ids offered in the prompt.
inline Validated<CvePrediction> validate_prediction(const Json& j, const std::vector<std::string>& candidates) {
    detail::Checker c;
    if (!j.is_object()) return {std::nullopt, "prediction: expected a JSON object"};
    CvePrediction p;
    p.behavior_explanation = c.str(j, "", "behavior_explanation");
    const std::string matched = c.str(j, "", "matched_cve");
    p.matched_cve = std::string(text::trim(matched));
    p.justification = c.str(j, "", "justification");
    if (c.errors.empty()) {
        if (p.matched_cve != kNoMatch && !text::is_cve_id(p.matched_cve))
            c.errors.push_back("matched_cve: \"" + p.matched_cve + "\" is neither a CVE id nor NONE");
        else if (p.matched_cve != kNoMatch &&
                 std::find(candidates.begin(), candidates.end(), p.matched_cve) == candidates.end())
            c.errors.push_back("matched_cve: " + p.matched_cve + " is not one of the listed candidates");
    }
    if (!c.errors.empty()) return {std::nullopt, c.joined()};
    return {std::move(p), {}};
}

// ---------------------------------------------------------------------------
// JSON forms used in reports (stable key order).

inline OrderedJson to_json(const Verdict& v) {
    OrderedJson j;
    j["label"] = std::string(to_string(v.label));
    j["confidence"] = v.confidence ? OrderedJson(*v.confidence) : OrderedJson(nullptr);
    j["rationale"] = v.rationale;
    return j;
}

inline OrderedJson to_json(const CodeSummary& s) {
    OrderedJson j;
    j["verdict"] = to_json(s.verdict);
    j["summary"] = s.summary;
    j["activities"] = s.activities;
    const auto& i = s.indicators_of_compromise;
    j["indicators_of_compromise"] = {{"urls", i.urls},
                                     {"created_files", i.created_files},
                                     {"registry_entries", i.registry_entries},
                                     {"mutex", i.mutex},
                                     {"network_activity", i.network_activity}};
    j["libraries_used"] = s.libraries_used;
    j["cve_search_queries"] = {{"status", s.cve_search_queries.status},
                               {"message", s.cve_search_queries.message},
                               {"keywords", s.cve_search_queries.keywords}};
    j["threat_mapping"] = s.threat_mapping ? OrderedJson(*s.threat_mapping) : OrderedJson(nullptr);
    return j;
}

inline OrderedJson to_json(const CvePrediction& p) {
    return {{"behavior_explanation", p.behavior_explanation},
            {"matched_cve", p.matched_cve},
            {"justification", p.justification}};
}

// ---------------------------------------------------------------------------
// JSON schemas sent to backends that support constrained output.

inline Json summary_schema() {
    auto str_list = Json{{"type", "array"}, {"items", {{"type", "string"}}}};
    return {
        {"type", "object"},
        {"additionalProperties", false},
        {"required", {"verdict", "summary", "activities", "indicators_of_compromise", "libraries_used",
                      "cve_search_queries", "threat_mapping"}},
        {"properties",
         {{"verdict",
           {{"type", "object"},
            {"additionalProperties", false},
            {"required", {"label", "confidence", "rationale"}},
            {"properties",
             {{"label", {{"type", "string"}, {"enum", {"Benign", "Suspicious", "Malicious"}}}},
              {"confidence", {{"type", "number"}, {"minimum", 0}, {"maximum", 1}}},
              {"rationale", {{"type", "string"}}}}}}},
          {"summary", {{"type", "string"}}},
          {"activities", str_list},
          {"indicators_of_compromise",
           {{"type", "object"},
            {"additionalProperties", false},
            {"required", {"urls", "created_files", "registry_entries", "mutex", "network_activity"}},
            {"properties",
             {{"urls", str_list},
              {"created_files", str_list},
              {"registry_entries", str_list},
              {"mutex", str_list},
              {"network_activity", str_list}}}}},
          {"libraries_used", str_list},
          {"cve_search_queries",
           {{"type", "object"},
            {"additionalProperties", false},
            {"required", {"status", "message", "keywords"}},
            {"properties", {{"status", {{"type", "string"}}}, {"message", {{"type", "string"}}}, {"keywords", str_list}}}}},
          {"threat_mapping", str_list}}}};
}

inline Json prediction_schema() {
    return {{"type", "object"},
            {"additionalProperties", false},
            {"required", {"behavior_explanation", "matched_cve", "justification"}},
            {"properties",
             {{"behavior_explanation", {{"type", "string"}}},
              {"matched_cve", {{"type", "string"}, {"pattern", "^(CVE-[0-9]{4}-[0-9]{4,}|NONE)$"}}},
              {"justification", {{"type", "string"}}}}}};
}

}  // namespace malcve::llm
