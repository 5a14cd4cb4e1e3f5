// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "malcve/deobf/java_lexer.hpp"

namespace malcve::deobf {

struct SourceUnit {
    std::string path;  ///< relative to the decompiler output root
    std::string text;
    std::size_t folded_count = 0;

    friend bool operator==(const SourceUnit&, const SourceUnit&) = default;
};

struct FailedFile {
    std::string path;
    std::string reason;

    friend bool operator==(const FailedFile&, const FailedFile&) = default;
};

struct FoldReport {
    std::size_t total_folds = 0;
    std::vector<FailedFile> failed_files;
};

struct FoldOutcome {
    SourceUnit unit;
    std::optional<std::string> error;  ///< set when the file was left untouched
};

namespace detail {

/// A compile-time value of the supported expression subset.
struct Value {
    enum Type { str, chr, i32, i64, boolean, chars, builder } type = str;
    std::u16string s;    // str, chars, builder
    std::int64_t n = 0;  // chr, i32, i64, boolean
    int ops = 0;         // operations performed; 0 means the text was already a literal

    bool numeric() const { return type == chr || type == i32 || type == i64; }
};

struct Parsed {
    Value v;
    std::size_t next = 0;
    bool complete = true;  ///< false when an unsupported postfix (call, index...) follows
};

inline std::u16string decimal16(std::int64_t n) {
    std::u16string out;
    for (char c : std::to_string(n)) out.push_back(static_cast<char16_t>(c));
    return out;
}

/// Java string conversion of a primitive or String value.
inline std::optional<std::u16string> to_java_string(const Value& v) {
    switch (v.type) {
        case Value::str: return v.s;
        case Value::chr: return std::u16string(1, static_cast<char16_t>(v.n));
        case Value::i32:
        case Value::i64: return decimal16(v.n);
        case Value::boolean: return v.n ? std::u16string(u"true") : std::u16string(u"false");
        default: return std::nullopt;
    }
}

inline std::int64_t wrap32(std::int64_t x) {
    return static_cast<std::int32_t>(static_cast<std::uint32_t>(static_cast<std::uint64_t>(x)));
}

/// Binary numeric operation after promotion. Arithmetic wraps like the JVM.
inline std::optional<Value> numeric_op(std::string_view op, const Value& a, const Value& b) {
    const bool shift = op == "<<" || op == ">>" || op == ">>>";
    const bool wide = shift ? a.type == Value::i64 : (a.type == Value::i64 || b.type == Value::i64);
    Value r;
    r.type = wide ? Value::i64 : Value::i32;
    r.ops = a.ops + b.ops + 1;
    const auto x = static_cast<std::uint64_t>(a.n), y = static_cast<std::uint64_t>(b.n);
    std::uint64_t out = 0;
    if (op == "+") out = x + y;
    else if (op == "-") out = x - y;
    else if (op == "*") out = x * y;
    else if (op == "&") out = x & y;
    else if (op == "|") out = x | y;
    else if (op == "^") out = x ^ y;
    else if (op == "/" || op == "%") {
        std::int64_t lhs = wide ? a.n : wrap32(a.n), rhs = wide ? b.n : wrap32(b.n);
        if (rhs == 0) return std::nullopt;
        const std::int64_t min = wide ? INT64_MIN : INT32_MIN;
        if (rhs == -1) out = op == "/" ? (lhs == min ? static_cast<std::uint64_t>(lhs) : static_cast<std::uint64_t>(-lhs)) : 0;
        else out = static_cast<std::uint64_t>(op == "/" ? lhs / rhs : lhs % rhs);
    } else if (shift) {
        const unsigned d = static_cast<unsigned>(b.n) & (wide ? 63u : 31u);
        if (wide) {
            if (op == "<<") out = x << d;
            else if (op == ">>") out = static_cast<std::uint64_t>(a.n >> d);
            else out = x >> d;
        } else {
            const auto ux = static_cast<std::uint32_t>(x);
            if (op == "<<") out = static_cast<std::uint32_t>(ux << d);
            else if (op == ">>") out = static_cast<std::uint64_t>(static_cast<std::int64_t>(static_cast<std::int32_t>(ux) >> d));
            else out = ux >> d;
        }
    } else {
        return std::nullopt;
    }
    r.n = wide ? static_cast<std::int64_t>(out) : wrap32(static_cast<std::int64_t>(out));
    return r;
}

inline std::optional<Value> binary_op(std::string_view op, const Value& a, const Value& b) {
    if (op == "+" && (a.type == Value::str || b.type == Value::str)) {
        auto l = to_java_string(a), r = to_java_string(b);
        if (!l || !r) return std::nullopt;
        Value v;
        v.type = Value::str;
        v.s = *l + *r;
        v.ops = a.ops + b.ops + 1;
        return v;
    }
    if (a.type == Value::boolean && b.type == Value::boolean && (op == "&" || op == "|" || op == "^")) {
        Value v;
        v.type = Value::boolean;
        v.n = op == "&" ? (a.n & b.n) : op == "|" ? (a.n | b.n) : (a.n ^ b.n);
        v.ops = a.ops + b.ops + 1;
        return v;
    }
    if (a.numeric() && b.numeric()) return numeric_op(op, a, b);
    return std::nullopt;
}

inline int precedence(const Token& t) {
    if (t.kind != Tok::op) return -1;
    const auto s = t.text;
    if (s == "*" || s == "/" || s == "%") return 9;
    if (s == "+" || s == "-") return 8;
    if (s == "<<" || s == ">>" || s == ">>>") return 7;
    if (s == "&") return 5;
    if (s == "^") return 4;
    if (s == "|") return 3;
    return -1;
}

/// Evaluates the statically computable subset of Java expressions over a
/// token stream. Every parse function returns nullopt as soon as anything
/// outside the subset is met; callers never need the extent of a
/// non-static expression.
class Evaluator {
public:
    explicit Evaluator(const std::vector<Token>& toks) : t_(toks) {}

    bool is(std::size_t i, std::string_view s) const { return i < t_.size() && t_[i].is(s); }

    /// `(T)` with a supported cast target at i; returns the target or empty.
    std::string_view cast_target(std::size_t i) const {
        if (!is(i, "(") || !is(i + 2, ")") || i + 1 >= t_.size()) return {};
        auto n = t_[i + 1].text;
        if (t_[i + 1].kind != Tok::identifier) return {};
        if (n == "char" || n == "int" || n == "byte" || n == "short" || n == "long" || n == "String") return n;
        return {};
    }

    std::optional<Parsed> expr(std::size_t i, int min_prec = 0) const {
        auto lhs = unary(i);
        if (!lhs) return std::nullopt;
        for (;;) {
            std::size_t j = lhs->next;
            if (j >= t_.size()) break;
            int p = precedence(t_[j]);
            if (p < 0 || p < min_prec) break;
            auto rhs = expr(j + 1, p + 1);
            if (!rhs) return std::nullopt;
            auto v = binary_op(t_[j].text, lhs->v, rhs->v);
            if (!v) return std::nullopt;
            lhs = Parsed{std::move(*v), rhs->next, true};
        }
        return lhs;
    }

    std::optional<Parsed> unary(std::size_t i) const {
        if (i >= t_.size()) return std::nullopt;
        if (is(i, "-") || is(i, "+") || is(i, "~")) {
            auto o = unary(i + 1);
            if (!o || !o->v.numeric()) return std::nullopt;
            Value v;
            v.type = o->v.type == Value::i64 ? Value::i64 : Value::i32;
            v.ops = o->v.ops + 1;
            const auto x = static_cast<std::uint64_t>(o->v.n);
            std::uint64_t r = is(i, "-") ? (0 - x) : is(i, "~") ? ~x : x;
            v.n = v.type == Value::i64 ? static_cast<std::int64_t>(r) : wrap32(static_cast<std::int64_t>(r));
            return Parsed{std::move(v), o->next, true};
        }
        if (auto target = cast_target(i); !target.empty()) {
            if (target == "String" && (is(i + 3, "-") || is(i + 3, "+"))) return std::nullopt;
            auto o = unary(i + 3);
            if (!o) return std::nullopt;
            auto v = cast(target, o->v);
            if (!v) return std::nullopt;
            return Parsed{std::move(*v), o->next, true};
        }
        auto p = postfix_primary(i);
        if (!p || !p->complete) return std::nullopt;
        return p;
    }

    static std::optional<Value> cast(std::string_view target, const Value& in) {
        Value v = in;
        if (target == "String") {
            if (in.type != Value::str) return std::nullopt;
            return v;
        }
        if (!in.numeric()) return std::nullopt;
        v.ops = in.ops + 1;
        const auto x = static_cast<std::uint64_t>(in.n);
        if (target == "char") {
            v.type = Value::chr;
            v.n = static_cast<std::int64_t>(x & 0xFFFF);
        } else if (target == "byte") {
            v.type = Value::i32;
            v.n = static_cast<std::int8_t>(static_cast<std::uint8_t>(x));
        } else if (target == "short") {
            v.type = Value::i32;
            v.n = static_cast<std::int16_t>(static_cast<std::uint16_t>(x));
        } else if (target == "int") {
            v.type = Value::i32;
            v.n = wrap32(in.n);
        } else {
            v.type = Value::i64;
        }
        return v;
    }

    /// Parses `( expr )` at i, requiring the closing paren. Returns the
    /// value and the index after ')'.
    std::optional<Parsed> paren_arg(std::size_t i) const {
        if (!is(i, "(")) return std::nullopt;
        auto e = expr(i + 1);
        if (!e || !is(e->next, ")")) return std::nullopt;
        e->next += 1;
        return e;
    }

    /// Length of a `String`, `java.lang.String` (or other class) name at i.
    std::size_t qualified(std::size_t i, std::string_view cls) const {
        if (is(i, cls)) return 1;
        if (is(i, "java") && is(i + 1, ".") && is(i + 2, "lang") && is(i + 3, ".") && is(i + 4, cls)) return 5;
        return 0;
    }

    std::optional<Parsed> primary(std::size_t i) const {
        if (i >= t_.size()) return std::nullopt;
        const Token& t = t_[i];
        Value v;
        switch (t.kind) {
            case Tok::string_lit:
                if (!t.decodable) return std::nullopt;
                v.type = Value::str;
                v.s = t.str;
                return Parsed{std::move(v), i + 1, true};
            case Tok::char_lit:
                if (!t.decodable) return std::nullopt;
                v.type = Value::chr;
                v.n = t.str[0];
                return Parsed{std::move(v), i + 1, true};
            case Tok::int_lit:
                if (!t.decodable) return std::nullopt;
                v.type = Value::i32;
                v.n = wrap32(static_cast<std::int64_t>(t.num));
                return Parsed{std::move(v), i + 1, true};
            case Tok::long_lit:
                if (!t.decodable) return std::nullopt;
                v.type = Value::i64;
                v.n = static_cast<std::int64_t>(t.num);
                return Parsed{std::move(v), i + 1, true};
            case Tok::identifier: break;
            case Tok::op:
                if (t.text == "(" && cast_target(i).empty()) return paren_arg(i);
                return std::nullopt;
            default: return std::nullopt;
        }
        if (t.text == "true" || t.text == "false") {
            v.type = Value::boolean;
            v.n = t.text == "true";
            return Parsed{std::move(v), i + 1, true};
        }
        if (t.text == "new") return creation(i + 1);
        if (auto n = qualified(i, "String"); n && is(i + n, ".") && is(i + n + 1, "valueOf")) {
            auto a = paren_arg(i + n + 2);
            if (!a) return std::nullopt;
            if (a->v.type == Value::chars) {
                v.s = a->v.s;
            } else {
                auto s = to_java_string(a->v);
                if (!s) return std::nullopt;
                v.s = *s;
            }
            v.type = Value::str;
            v.ops = a->v.ops + 1;
            return Parsed{std::move(v), a->next, true};
        }
        return std::nullopt;
    }

    /// `new ...` with i just after `new`.
    std::optional<Parsed> creation(std::size_t i) const {
        Value v;
        if (is(i, "char") && is(i + 1, "[") && is(i + 2, "]") && is(i + 3, "{")) {
            v.type = Value::chars;
            v.ops = 1;
            std::size_t j = i + 4;
            while (!is(j, "}")) {
                auto e = expr(j);
                if (!e) return std::nullopt;
                if (e->v.type == Value::i32 && e->v.n >= 0 && e->v.n <= 0xFFFF) {
                    // An int constant that fits narrows implicitly in an initializer.
                } else if (e->v.type != Value::chr) {
                    return std::nullopt;
                }
                v.s.push_back(static_cast<char16_t>(e->v.n));
                v.ops += e->v.ops;
                j = e->next;
                if (is(j, ",")) ++j;
                else if (!is(j, "}")) return std::nullopt;
            }
            return Parsed{std::move(v), j + 1, true};
        }
        if (auto n = qualified(i, "String")) {
            if (is(i + n, "(") && is(i + n + 1, ")")) {
                v.type = Value::str;
                v.ops = 1;
                return Parsed{std::move(v), i + n + 2, true};
            }
            auto a = paren_arg(i + n);
            if (!a || (a->v.type != Value::chars && a->v.type != Value::str)) return std::nullopt;
            v.type = Value::str;
            v.s = a->v.s;
            v.ops = a->v.ops + 1;
            return Parsed{std::move(v), a->next, true};
        }
        std::size_t n = qualified(i, "StringBuilder");
        if (!n) n = qualified(i, "StringBuffer");
        if (!n) return std::nullopt;
        v.type = Value::builder;
        v.ops = 1;
        if (is(i + n, "(") && is(i + n + 1, ")")) return Parsed{std::move(v), i + n + 2, true};
        auto a = paren_arg(i + n);
        if (!a) return std::nullopt;
        if (a->v.type == Value::str) {
            v.s = a->v.s;
        } else if (a->v.type == Value::i32 || a->v.type == Value::chr) {
            // Capacity constructor; a char argument widens to int.
            if (a->v.n < 0) return std::nullopt;
        } else {
            return std::nullopt;
        }
        v.ops += a->v.ops;
        return Parsed{std::move(v), a->next, true};
    }

    /// A primary followed by the supported member calls. Stops at the first
    /// unsupported postfix and reports it through `complete`.
    std::optional<Parsed> postfix_primary(std::size_t i) const {
        auto p = primary(i);
        if (!p) return std::nullopt;
        for (;;) {
            std::size_t j = p->next;
            if (is(j, "[") || is(j, "++") || is(j, "--") || is(j, "::")) {
                p->complete = false;
                return p;
            }
            if (!is(j, ".")) return p;
            auto name = j + 1 < t_.size() ? t_[j + 1].text : std::string_view{};
            Value& v = p->v;
            if (name == "toString" && is(j + 2, "(") && is(j + 3, ")") &&
                (v.type == Value::builder || v.type == Value::str)) {
                if (v.type == Value::builder) ++v.ops;
                v.type = Value::str;
                p->next = j + 4;
                continue;
            }
            if (name == "intern" && v.type == Value::str && is(j + 2, "(") && is(j + 3, ")")) {
                p->next = j + 4;
                continue;
            }
            if ((name == "append" && v.type == Value::builder) || (name == "concat" && v.type == Value::str)) {
                auto a = paren_arg(j + 2);
                if (!a) {
                    p->complete = false;
                    return p;
                }
                if (name == "concat" && a->v.type != Value::str) {
                    p->complete = false;
                    return p;
                }
                if (a->v.type == Value::chars) {
                    v.s += a->v.s;
                } else {
                    auto s = to_java_string(a->v);
                    if (!s) {
                        p->complete = false;
                        return p;
                    }
                    v.s += *s;
                }
                v.ops += a->v.ops + 1;
                p->next = a->next;
                continue;
            }
            p->complete = false;
            return p;
        }
    }

    /// The longest statically computable prefix of the additive chain at i.
    /// Returns the value of that prefix and whether its first operand is a
    /// String.
    std::optional<std::pair<Parsed, bool>> chain_prefix(std::size_t i) const {
        auto first = expr(i, 9);
        if (!first) return std::nullopt;
        const bool first_is_string = first->v.type == Value::str;
        Parsed acc = *first;
        while (is(acc.next, "+") || is(acc.next, "-")) {
            auto rhs = expr(acc.next + 1, 9);
            if (!rhs) break;
            auto v = binary_op(t_[acc.next].text, acc.v, rhs->v);
            if (!v) break;
            acc = Parsed{std::move(*v), rhs->next, true};
        }
        return std::pair{acc, first_is_string};
    }

private:
    const std::vector<Token>& t_;
};

/// Tokens after which an expression operand may begin and whose precedence
/// is below additive, so a chain starting here is a complete operand.
inline bool is_boundary(const Token& t) {
    static constexpr std::string_view ops[] = {
        "(",  ",",  "=",   "+=",  "-=",  "*=", "/=", "%=", "&=", "|=", "^=", "<<=", ">>=", ">>>=", "{",
        "[",  "?",  ":",   ";",   "->",  "==", "!=", "<",  ">",  "<=", ">=", "&&",  "||",  "&",    "|",
        "^",  "<<", ">>", ">>>", "}"};
    if (t.kind == Tok::op) {
        for (auto o : ops)
            if (t.text == o) return true;
        return false;
    }
    if (t.kind == Tok::identifier) return t.text == "return" || t.text == "case" || t.text == "throw" || t.text == "yield";
    return false;
}

/// True when a primary expression can begin at token i given its
/// predecessor. A '(' after a name, ')' or ']' is a call or a statement
/// header, not a parenthesized expression.
inline bool primary_can_start(const std::vector<Token>& t, std::size_t i) {
    if (i == 0) return true;
    const Token& prev = t[i - 1];
    if (prev.is(".")) return false;
    if (t[i].is("(")) {
        if (prev.kind == Tok::identifier || prev.is(")") || prev.is("]") || prev.is(">")) return false;
    }
    return true;
}

struct Fold {
    std::size_t first_tok, end_tok;
    std::string literal;
};

}  // namespace detail

/// Resolves statically computable String expressions in `unit` to
/// literals. Each substitution replaces a complete operand, so the
/// surrounding code is untouched. On a lexing failure the unit is returned
/// unchanged and `error` says why.
inline FoldOutcome fold_strings_checked(const SourceUnit& unit) {
    FoldOutcome out{unit, std::nullopt};
    auto lexed = lex_java(unit.text);
    if (lexed.error) {
        out.error = *lexed.error;
        return out;
    }
    const auto& toks = lexed.tokens;
    detail::Evaluator ev(toks);
    std::vector<detail::Fold> folds;
    auto is_foldable = [](const detail::Value& v) { return v.type == detail::Value::str && v.ops > 0; };

    for (std::size_t i = 0; i < toks.size();) {
        if (!detail::primary_can_start(toks, i)) {
            ++i;
            continue;
        }
        const Token* prev = i ? &toks[i - 1] : nullptr;
        const bool boundary = !prev || detail::is_boundary(*prev);
        const bool after_plus = prev && prev->is("+");
        std::optional<std::pair<std::size_t, std::u16string>> site;

        if (boundary || after_plus) {
            if (auto chain = ev.chain_prefix(i)) {
                auto& [p, first_is_string] = *chain;
                if (is_foldable(p.v) && (boundary || first_is_string)) site.emplace(p.next, p.v.s);
            }
        }
        if (!site) {
            if (auto p = ev.postfix_primary(i); p && is_foldable(p->v)) site.emplace(p->next, p->v.s);
        }
        if (!site) {
            ++i;
            continue;
        }
        // An unrepresentable value (lone surrogate) leaves the whole
        // expression as written.
        if (auto lit = java_quote(site->second)) folds.push_back({i, site->first, std::move(*lit)});
        i = site->first;
    }

    if (folds.empty()) return out;
    std::string text;
    std::size_t pos = 0;
    for (const auto& f : folds) {
        text.append(unit.text, pos, toks[f.first_tok].begin - pos);
        text += f.literal;
        pos = toks[f.end_tok - 1].end;
    }
    text.append(unit.text, pos, std::string::npos);
    if (auto check = lex_java(text); check.error) {
        out.error = "rewrite did not re-tokenize: " + *check.error;
        return out;
    }
    out.unit.text = std::move(text);
    out.unit.folded_count += folds.size();
    return out;
}

inline SourceUnit fold_strings(const SourceUnit& unit) { return fold_strings_checked(unit).unit; }

inline std::pair<std::vector<SourceUnit>, FoldReport> fold_tree(const std::vector<SourceUnit>& units) {
    std::pair<std::vector<SourceUnit>, FoldReport> r;
    r.first.reserve(units.size());
    for (const auto& u : units) {
        auto o = fold_strings_checked(u);
        if (o.error) r.second.failed_files.push_back({u.path, *o.error});
        r.second.total_folds += o.unit.folded_count - u.folded_count;
        r.first.push_back(std::move(o.unit));
    }
    return r;
}

}  // namespace malcve::deobf
