// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "malcve/util/text.hpp"

namespace malcve::deobf {

enum class Tok { identifier, int_lit, long_lit, float_lit, char_lit, string_lit, text_block, op, other };

struct Token {
    Tok kind = Tok::other;
    std::size_t begin = 0;  ///< byte offsets into the source
    std::size_t end = 0;
    std::string_view text;
    std::u16string str;        ///< decoded value of string/char literals
    std::uint64_t num = 0;     ///< magnitude of integer literals
    bool decodable = true;     ///< false when the literal's value is not representable
    bool decimal = false;      ///< integer literal written in base 10

    bool is(std::string_view s) const { return (kind == Tok::op || kind == Tok::identifier) && text == s; }
};

struct LexResult {
    std::vector<Token> tokens;
    std::optional<std::string> error;
};

namespace detail {

inline bool ident_start(unsigned char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' || c == '$' || c >= 0x80;
}
inline bool ident_part(unsigned char c) { return ident_start(c) || (c >= '0' && c <= '9'); }

inline int hex_val(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
}

inline constexpr std::string_view kOps[] = {
    ">>>=", "<<=", ">>=", ">>>", "...", "->", "::", "++", "--", "&&", "||", "==", "!=", "<=", ">=",
    "+=",   "-=",  "*=",  "/=",  "%=",  "&=", "|=", "^=", "<<", ">>", "(",  ")",  "{",  "}",  "[",
    "]",    ";",   ",",   ".",   "@",   "=",  ">",  "<",  "!",  "~",  "?",  ":",  "+",  "-",  "*",
    "/",    "&",   "|",   "^",   "%"};

/// Decodes the body of a string or char literal (between the quotes).
/// Returns false when an escape is malformed; sets `decodable` to false
/// when the value cannot be represented faithfully.
inline bool decode_literal(std::string_view body, std::u16string& out, bool& decodable) {
    for (std::size_t i = 0; i < body.size();) {
        char c = body[i];
        if (c != '\\') {
            auto cp = text::next_utf8(body, i);
            if (!cp) {
                decodable = false;
                ++i;
                continue;
            }
            text::append_utf16(out, *cp);
            continue;
        }
        if (i + 1 >= body.size()) return false;
        char e = body[i + 1];
        i += 2;
        switch (e) {
            case 'b': out.push_back(u'\b'); break;
            case 't': out.push_back(u'\t'); break;
            case 'n': out.push_back(u'\n'); break;
            case 'f': out.push_back(u'\f'); break;
            case 'r': out.push_back(u'\r'); break;
            case 's': out.push_back(u' '); break;
            case '"': out.push_back(u'"'); break;
            case '\'': out.push_back(u'\''); break;
            case '\\': out.push_back(u'\\'); break;
            case 'u': {
                while (i < body.size() && body[i] == 'u') ++i;
                if (i + 4 > body.size()) return false;
                int v = 0;
                for (int k = 0; k < 4; ++k) {
                    int h = hex_val(body[i + static_cast<std::size_t>(k)]);
                    if (h < 0) return false;
                    v = v * 16 + h;
                }
                i += 4;
                // These unicode escapes are translated before tokenization
                // and would change the literal's extent or meaning.
                if (v == 0x22 || v == 0x27 || v == 0x5C || v == 0x0A || v == 0x0D) decodable = false;
                out.push_back(static_cast<char16_t>(v));
                break;
            }
            default: {
                if (e < '0' || e > '7') return false;
                int v = e - '0';
                int max_digits = e <= '3' ? 2 : 1;
                for (int k = 0; k < max_digits && i < body.size() && body[i] >= '0' && body[i] <= '7'; ++k)
                    v = v * 8 + (body[i++] - '0');
                out.push_back(static_cast<char16_t>(v));
            }
        }
    }
    return true;
}

inline void lex_number(std::string_view src, std::size_t& i, Token& t) {
    const std::size_t start = i;
    auto at = [&](std::size_t k) -> char { return k < src.size() ? src[k] : '\0'; };
    int base = 10;
    bool is_float = false;
    if (at(i) == '0' && (at(i + 1) == 'x' || at(i + 1) == 'X')) {
        base = 16;
        i += 2;
        while (hex_val(at(i)) >= 0 || at(i) == '_') ++i;
        if (at(i) == '.' || at(i) == 'p' || at(i) == 'P') {
            is_float = true;
            if (at(i) == '.') ++i;
            while (hex_val(at(i)) >= 0 || at(i) == '_') ++i;
            if (at(i) == 'p' || at(i) == 'P') {
                ++i;
                if (at(i) == '+' || at(i) == '-') ++i;
                while (std::isdigit(static_cast<unsigned char>(at(i))) || at(i) == '_') ++i;
            }
        }
    } else if (at(i) == '0' && (at(i + 1) == 'b' || at(i + 1) == 'B')) {
        base = 2;
        i += 2;
        while (at(i) == '0' || at(i) == '1' || at(i) == '_') ++i;
    } else {
        while (std::isdigit(static_cast<unsigned char>(at(i))) || at(i) == '_') ++i;
        if (at(i) == '.' && std::isdigit(static_cast<unsigned char>(at(i + 1)))) {
            is_float = true;
            ++i;
            while (std::isdigit(static_cast<unsigned char>(at(i))) || at(i) == '_') ++i;
        } else if (at(i) == '.' && !ident_start(static_cast<unsigned char>(at(i + 1)))) {
            is_float = true;
            ++i;
        }
        if (at(i) == 'e' || at(i) == 'E') {
            is_float = true;
            ++i;
            if (at(i) == '+' || at(i) == '-') ++i;
            while (std::isdigit(static_cast<unsigned char>(at(i))) || at(i) == '_') ++i;
        }
        if (!is_float && src[start] == '0' && i - start > 1) base = 8;
    }
    char suffix = at(i);
    if (suffix == 'f' || suffix == 'F' || suffix == 'd' || suffix == 'D') {
        is_float = true;
        ++i;
    } else if (!is_float && (suffix == 'l' || suffix == 'L')) {
        t.kind = Tok::long_lit;
        ++i;
    } else {
        t.kind = Tok::int_lit;
    }
    if (is_float) {
        t.kind = Tok::float_lit;
        t.decodable = false;
        return;
    }
    t.decimal = base == 10;
    std::string_view digits = src.substr(start, i - start);
    if (t.kind == Tok::long_lit) digits.remove_suffix(1);
    if (base == 16 || base == 2) digits.remove_prefix(2);
    unsigned __int128 v = 0;
    bool any = false;
    for (char c : digits) {
        if (c == '_') continue;
        int d = hex_val(c);
        if (d < 0 || d >= base) {
            t.decodable = false;
            return;
        }
        v = v * static_cast<unsigned>(base) + static_cast<unsigned>(d);
        any = true;
        if (v > ~std::uint64_t{0}) {
            t.decodable = false;
            return;
        }
    }
    if (!any) {
        t.decodable = false;
        return;
    }
    const bool is_long = t.kind == Tok::long_lit;
    std::uint64_t limit = base == 10 ? (is_long ? (std::uint64_t{1} << 63) : 2147483648ULL)
                                     : (is_long ? ~std::uint64_t{0} : 0xFFFFFFFFULL);
    if (v > limit) t.decodable = false;
    t.num = static_cast<std::uint64_t>(v);
}

}  // namespace detail

/// Tokenizes Java source. Comments and whitespace are dropped; every token
/// keeps its byte span so rewrites can splice the original text.
inline LexResult lex_java(std::string_view src) {
    LexResult r;
    auto line_of = [&](std::size_t pos) {
        return std::to_string(1 + std::count(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
    };
    std::size_t i = 0;
    while (i < src.size()) {
        unsigned char c = static_cast<unsigned char>(src[i]);
        if (text::is_space(static_cast<char>(c))) {
            ++i;
            continue;
        }
        if (c == '/' && i + 1 < src.size() && src[i + 1] == '/') {
            while (i < src.size() && src[i] != '\n') ++i;
            continue;
        }
        if (c == '/' && i + 1 < src.size() && src[i + 1] == '*') {
            auto close = src.find("*/", i + 2);
            if (close == std::string_view::npos) {
                r.error = "line " + line_of(i) + ": unterminated comment";
                return r;
            }
            i = close + 2;
            continue;
        }
        Token t;
        t.begin = i;
        if (src.compare(i, 3, "\"\"\"") == 0) {
            std::size_t k = i + 3;
            for (;;) {
                if (k >= src.size()) {
                    r.error = "line " + line_of(i) + ": unterminated text block";
                    return r;
                }
                if (src[k] == '\\') {
                    k += 2;
                    continue;
                }
                if (src.compare(k, 3, "\"\"\"") == 0) break;
                ++k;
            }
            i = k + 3;
            t.kind = Tok::text_block;
            t.decodable = false;
        } else if (c == '"' || c == '\'') {
            std::size_t k = i + 1;
            while (k < src.size() && src[k] != static_cast<char>(c) && src[k] != '\n') k += src[k] == '\\' ? 2 : 1;
            if (k >= src.size() || src[k] != static_cast<char>(c)) {
                r.error = "line " + line_of(i) + ": unterminated " + (c == '"' ? "string" : "char") + " literal";
                return r;
            }
            t.kind = c == '"' ? Tok::string_lit : Tok::char_lit;
            if (!detail::decode_literal(src.substr(i + 1, k - i - 1), t.str, t.decodable)) {
                r.error = "line " + line_of(i) + ": invalid escape sequence";
                return r;
            }
            if (t.kind == Tok::char_lit && t.str.size() != 1) t.decodable = false;
            i = k + 1;
        } else if (std::isdigit(c) || (c == '.' && i + 1 < src.size() && std::isdigit(static_cast<unsigned char>(src[i + 1])))) {
            detail::lex_number(src, i, t);
        } else if (detail::ident_start(c)) {
            while (i < src.size() && detail::ident_part(static_cast<unsigned char>(src[i]))) ++i;
            t.kind = Tok::identifier;
        } else {
            t.kind = Tok::other;
            std::size_t len = 1;
            for (auto op : detail::kOps) {
                if (src.compare(i, op.size(), op) == 0) {
                    t.kind = Tok::op;
                    len = op.size();
                    break;
                }
            }
            i += len;
        }
        t.end = i;
        t.text = src.substr(t.begin, t.end - t.begin);
        r.tokens.push_back(std::move(t));
    }
    return r;
}

/// Renders `s` as a Java string literal. Printable ASCII is kept, the usual
/// escapes are used where they exist and everything else becomes \uXXXX.
/// Returns nullopt if `s` contains an unpaired surrogate.
inline std::optional<std::string> java_quote(std::u16string_view s) {
    if (!text::is_well_formed_utf16(s)) return std::nullopt;
    static constexpr char hex[] = "0123456789ABCDEF";
    std::string out = "\"";
    for (char16_t c : s) {
        switch (c) {
            case u'"': out += "\\\""; break;
            case u'\\': out += "\\\\"; break;
            case u'\n': out += "\\n"; break;
            case u'\r': out += "\\r"; break;
            case u'\t': out += "\\t"; break;
            case u'\b': out += "\\b"; break;
            case u'\f': out += "\\f"; break;
            default:
                if (c >= 0x20 && c < 0x7F) {
                    out.push_back(static_cast<char>(c));
                } else {
                    out += "\\u";
                    for (int k = 3; k >= 0; --k) out.push_back(hex[(c >> (4 * k)) & 0xF]);
                }
        }
    }
    out.push_back('"');
    return out;
}

}  // namespace malcve::deobf
