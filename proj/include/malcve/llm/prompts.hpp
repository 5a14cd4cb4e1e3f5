// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <string_view>

#include "malcve/errors.hpp"
#include "malcve/util/files.hpp"
#include "malcve/util/sha256.hpp"

#ifndef MALCVE_PROMPT_DIR
#define MALCVE_PROMPT_DIR "prompts"
#endif

namespace malcve::llm {

struct PromptTemplate {
    std::string name;
    std::string text;
    std::string sha256;
};

/// Replaces `{key}` placeholders in one left-to-right pass, so substituted
/// text (source code, summaries) is never expanded again. Unknown
/// placeholders are left as written.
inline std::string render(std::string_view tmpl, const std::map<std::string, std::string, std::less<>>& values) {
    std::string out;
    out.reserve(tmpl.size());
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] == '{') {
            auto close = tmpl.find('}', i + 1);
            if (close != std::string_view::npos) {
                auto it = values.find(tmpl.substr(i + 1, close - i - 1));
                if (it != values.end()) {
                    out += it->second;
                    i = close + 1;
                    continue;
                }
            }
        }
        out.push_back(tmpl[i++]);
    }
    return out;
}

/// The three templates the analysis uses, read from a directory so they can
/// be revised without rebuilding. Their digests go into every report.
struct PromptSet {
    PromptTemplate summarize;
    PromptTemplate queries;
    PromptTemplate predict;

    static PromptSet load(const fs::path& dir = MALCVE_PROMPT_DIR) {
        auto one = [&](const char* name) {
            fs::path p = dir / (std::string(name) + ".txt");
            if (!fs::exists(p)) throw ConfigError("prompt template not found: " + p.string());
            std::string text = read_file(p);
            return PromptTemplate{name, text, sha256_hex(text)};
        };
        return {one("summarize"), one("queries"), one("predict")};
    }
};

}  // namespace malcve::llm
