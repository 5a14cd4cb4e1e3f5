// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <string>
#include <string_view>
#include <vector>

namespace malcve {

namespace detail {

inline std::vector<std::string_view> diff_lines(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    while (pos < s.size()) {
        auto nl = s.find('\n', pos);
        if (nl == std::string_view::npos) nl = s.size() - 1;
        out.push_back(s.substr(pos, nl - pos + 1));
        pos = nl + 1;
    }
    return out;
}

enum class EditOp { keep, del, ins };

/// Shortest edit script between two line sequences (Myers, O((N+M)D)).
inline std::vector<EditOp> myers(const std::vector<std::string_view>& a, const std::vector<std::string_view>& b) {
    const long n = static_cast<long>(a.size()), m = static_cast<long>(b.size());
    const long max = n + m;
    const long off = max + 1;
    std::vector<long> v(static_cast<std::size_t>(2 * max + 3), 0);
    std::vector<std::vector<long>> trace;
    long d_end = 0;
    for (long d = 0; d <= max; ++d) {
        trace.push_back(v);
        bool done = false;
        for (long k = -d; k <= d; k += 2) {
            long x;
            if (k == -d || (k != d && v[static_cast<std::size_t>(off + k - 1)] < v[static_cast<std::size_t>(off + k + 1)]))
                x = v[static_cast<std::size_t>(off + k + 1)];
            else
                x = v[static_cast<std::size_t>(off + k - 1)] + 1;
            long y = x - k;
            while (x < n && y < m && a[static_cast<std::size_t>(x)] == b[static_cast<std::size_t>(y)]) ++x, ++y;
            v[static_cast<std::size_t>(off + k)] = x;
            if (x >= n && y >= m) {
                done = true;
                break;
            }
        }
        if (done) {
            d_end = d;
            break;
        }
    }
    std::vector<EditOp> ops;
    long x = n, y = m;
    for (long d = d_end; d > 0; --d) {
        const auto& pv = trace[static_cast<std::size_t>(d)];
        long k = x - y;
        long prev_k = (k == -d || (k != d && pv[static_cast<std::size_t>(off + k - 1)] < pv[static_cast<std::size_t>(off + k + 1)]))
                          ? k + 1
                          : k - 1;
        long px = pv[static_cast<std::size_t>(off + prev_k)];
        long py = px - prev_k;
        while (x > px && y > py) {
            ops.push_back(EditOp::keep);
            --x, --y;
        }
        ops.push_back(x == px ? EditOp::ins : EditOp::del);
        x = px;
        y = py;
    }
    while (x > 0 && y > 0) {
        ops.push_back(EditOp::keep);
        --x, --y;
    }
    std::reverse(ops.begin(), ops.end());
    return ops;
}

inline void emit_line(std::string& out, char tag, std::string_view line) {
    out.push_back(tag);
    out.append(line);
    if (line.empty() || line.back() != '\n') out += "\n\\ No newline at end of file\n";
}

}  // namespace detail

/// `diff -u` style output between two texts, `context` lines around each
/// change. Empty when the texts are equal.
inline std::string unified_diff(std::string_view before, std::string_view after, std::string_view path,
                                std::size_t context = 3) {
    if (before == after) return {};
    auto a = detail::diff_lines(before);
    auto b = detail::diff_lines(after);
    auto ops = detail::myers(a, b);

    // Position of each op in both files.
    struct Step {
        detail::EditOp op;
        std::size_t ai, bi;
    };
    std::vector<Step> steps;
    std::size_t ai = 0, bi = 0;
    for (auto op : ops) {
        steps.push_back({op, ai, bi});
        if (op != detail::EditOp::ins) ++ai;
        if (op != detail::EditOp::del) ++bi;
    }

    std::string out = "--- a/" + std::string(path) + "\n+++ b/" + std::string(path) + "\n";
    std::size_t i = 0;
    while (i < steps.size()) {
        while (i < steps.size() && steps[i].op == detail::EditOp::keep) ++i;
        if (i == steps.size()) break;
        std::size_t start = i >= context ? i - context : 0;
        std::size_t end = i;
        // Extend the hunk while the next change is within 2*context lines.
        for (;;) {
            while (end < steps.size() && steps[end].op != detail::EditOp::keep) ++end;
            std::size_t gap = end;
            while (gap < steps.size() && steps[gap].op == detail::EditOp::keep) ++gap;
            if (gap < steps.size() && gap - end <= 2 * context) {
                end = gap;
                continue;
            }
            end = std::min(steps.size(), end + context);
            break;
        }
        std::size_t a_count = 0, b_count = 0;
        for (std::size_t s = start; s < end; ++s) {
            if (steps[s].op != detail::EditOp::ins) ++a_count;
            if (steps[s].op != detail::EditOp::del) ++b_count;
        }
        auto range = [](std::size_t first, std::size_t count) {
            return std::to_string(count ? first + 1 : first) + "," + std::to_string(count);
        };
        out += "@@ -" + range(steps[start].ai, a_count) + " +" + range(steps[start].bi, b_count) + " @@\n";
        for (std::size_t s = start; s < end; ++s) {
            switch (steps[s].op) {
                case detail::EditOp::keep: detail::emit_line(out, ' ', a[steps[s].ai]); break;
                case detail::EditOp::del: detail::emit_line(out, '-', a[steps[s].ai]); break;
                case detail::EditOp::ins: detail::emit_line(out, '+', b[steps[s].bi]); break;
            }
        }
        i = end;
    }
    return out;
}

}  // namespace malcve
