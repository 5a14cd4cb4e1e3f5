// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "malcve/deobfuscator.hpp"
#include "malcve/errors.hpp"
#include "malcve/util/files.hpp"
#include "malcve/util/subprocess.hpp"

namespace malcve::decompile {

enum class Role { primary, fallback };

struct DecompilerSpec {
    std::string name;
    std::string command_template;  ///< argv with {jar} and {outdir} placeholders
    std::chrono::milliseconds timeout = std::chrono::seconds(120);
    Role role = Role::primary;
};

enum class Status { ok, failed, excluded };

inline std::string_view to_string(Status s) {
    switch (s) {
        case Status::ok: return "ok";
        case Status::failed: return "failed";
        case Status::excluded: return "excluded";
    }
    return "?";
}

struct Attempt {
    std::string tool;
    int exit_code = -1;
    bool timed_out = false;
    std::size_t java_files = 0;
    bool succeeded = false;
};

struct DecompileResult {
    Status status = Status::failed;
    std::optional<std::string> tool_used;
    std::optional<fs::path> source_dir;
    std::string diagnostics;
    std::vector<Attempt> attempts;
    /// Owns the directory holding `source_dir`; the sources are deleted when
    /// the last copy of the result goes away.
    std::shared_ptr<TempDir> workspace;
};

/// CFR 0.152 first, Procyon 0.6.0 as fallback. `tools_dir` holds the jars.
inline std::vector<DecompilerSpec> default_specs(const std::string& tools_dir = "/opt/decompilers") {
    return {
        {"cfr-0.152", "java -jar " + tools_dir + "/cfr-0.152.jar {jar} --outputdir {outdir}",
         std::chrono::seconds(120), Role::primary},
        {"procyon-0.6.0", "java -jar " + tools_dir + "/procyon-decompiler-0.6.0.jar -jar {jar} -o {outdir}",
         std::chrono::seconds(120), Role::fallback},
    };
}

/// Splits a template on whitespace; single or double quotes group words.
/// No other shell syntax is interpreted.
inline std::vector<std::string> split_command(const std::string& tmpl) {
    std::vector<std::string> out;
    std::string cur;
    bool in_word = false;
    char quote = 0;
    for (char c : tmpl) {
        if (quote) {
            if (c == quote) quote = 0;
            else cur.push_back(c);
        } else if (c == '\'' || c == '"') {
            quote = c;
            in_word = true;
        } else if (text::is_space(c)) {
            if (in_word) out.push_back(std::move(cur));
            cur.clear();
            in_word = false;
        } else {
            cur.push_back(c);
            in_word = true;
        }
    }
    if (quote) throw ConfigError("unbalanced quote in command template: " + tmpl);
    if (in_word) out.push_back(std::move(cur));
    return out;
}

inline std::vector<std::string> render_command(const std::string& tmpl, const fs::path& jar, const fs::path& outdir) {
    auto argv = split_command(tmpl);
    for (auto& a : argv) {
        a = text::replace_all(a, "{jar}", jar.string());
        a = text::replace_all(a, "{outdir}", outdir.string());
    }
    return argv;
}

/// Exactly one primary, which is tried first; fallbacks keep their order.
inline std::vector<DecompilerSpec> ordered(const std::vector<DecompilerSpec>& specs) {
    auto primaries = std::count_if(specs.begin(), specs.end(), [](const auto& s) { return s.role == Role::primary; });
    if (primaries != 1)
        throw ConfigError("exactly one primary decompiler is required (got " + std::to_string(primaries) + ")");
    std::vector<DecompilerSpec> out;
    for (const auto& s : specs)
        if (s.role == Role::primary) out.push_back(s);
    for (const auto& s : specs) {
        if (s.role == Role::primary) continue;
        out.push_back(s);
    }
    for (const auto& s : out) {
        if (s.name.empty()) throw ConfigError("decompiler name is empty");
        if (s.timeout.count() <= 0) throw ConfigError("decompiler " + s.name + " has a non-positive timeout");
        if (split_command(s.command_template).empty()) throw ConfigError("decompiler " + s.name + " has no command");
    }
    return out;
}

/// Non-empty `.java` files under `dir`.
inline std::size_t count_java_files(const fs::path& dir) {
    std::size_t n = 0;
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) return 0;
    for (auto it = fs::recursive_directory_iterator(dir, ec); !ec && it != fs::recursive_directory_iterator();
         it.increment(ec)) {
        if (it->is_regular_file(ec) && it->path().extension() == ".java" && it->file_size(ec) > 0) ++n;
    }
    return n;
}

/// Runs the primary decompiler, then each fallback in order until one exits
/// 0 and emits at least one non-empty `.java` file. If none does, the
/// result is `excluded` and nothing is left on disk.
inline DecompileResult decompile(const fs::path& jar_path, const std::vector<DecompilerSpec>& specs,
                                 const fs::path& workdir) {
    auto chain = ordered(specs);
    std::error_code ec;
    if (!fs::is_regular_file(jar_path, ec)) throw PreconditionError("input is not a readable file: " + jar_path.string());
    // Tool availability is a configuration problem, not a per-file failure.
    for (const auto& s : chain) {
        auto argv = split_command(s.command_template);
        if (!find_executable(argv[0])) throw ConfigError("decompiler " + s.name + ": executable not found: " + argv[0]);
    }

    DecompileResult r;
    r.workspace = std::make_shared<TempDir>(workdir, "decompile");
    const fs::path jar = fs::absolute(jar_path);
    for (std::size_t i = 0; i < chain.size(); ++i) {
        const auto& s = chain[i];
        fs::path out = r.workspace->path() / ("out-" + std::to_string(i));
        fs::create_directories(out);
        auto pr = run_process(render_command(s.command_template, jar, out), s.timeout);
        Attempt a{s.name, pr.exit_code, pr.timed_out, 0, false};
        if (!pr.timed_out && pr.exit_code == 0) a.java_files = count_java_files(out);
        a.succeeded = a.java_files > 0;
        r.attempts.push_back(a);
        if (a.succeeded) {
            r.status = Status::ok;
            r.tool_used = s.name;
            r.source_dir = out;
            return r;
        }
        std::string why = pr.timed_out ? "timed out after " + std::to_string(s.timeout.count()) + " ms"
                          : pr.exit_code != 0 ? "exit code " + std::to_string(pr.exit_code)
                                              : "no .java output";
        if (!r.diagnostics.empty()) r.diagnostics += "\n";
        r.diagnostics += s.name + ": " + why;
        auto tail = text::trim(pr.output);
        if (!tail.empty()) r.diagnostics += ": " + std::string(tail.substr(tail.size() > 512 ? tail.size() - 512 : 0));
        fs::remove_all(out, ec);
    }
    r.status = Status::excluded;
    r.workspace.reset();
    return r;
}

/// Reads every `.java` file under the result's source dir, sorted by path.
inline std::vector<deobf::SourceUnit> load_sources(const DecompileResult& r) {
    std::vector<deobf::SourceUnit> out;
    if (r.status != Status::ok || !r.source_dir) return out;
    for (const auto& e : fs::recursive_directory_iterator(*r.source_dir)) {
        if (!e.is_regular_file() || e.path().extension() != ".java") continue;
        out.push_back({fs::relative(e.path(), *r.source_dir).generic_string(), read_file(e.path()), 0});
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
    return out;
}

}  // namespace malcve::decompile
