// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "malcve/errors.hpp"
#include "malcve/util/text.hpp"
#include "malcve/util/tokens.hpp"

namespace malcve::embed {

using Vector = std::vector<float>;

enum class Provider { remote, local_deterministic };

inline std::string_view to_string(Provider p) {
    return p == Provider::remote ? "remote" : "local-deterministic";
}

inline Provider provider_from_string(std::string_view s) {
    if (s == "remote") return Provider::remote;
    if (s == "local-deterministic" || s == "local") return Provider::local_deterministic;
    throw ConfigError("unknown embedding provider: " + std::string(s));
}

struct EmbeddingConfig {
    Provider provider = Provider::local_deterministic;
    std::string model_id = "hashed-bow-v1";
    std::size_t dim = 1536;
    std::size_t request_batch_size = 64;
    int max_retries = 3;

    void validate() const {
        if (dim == 0) throw ConfigError("embedding dim must be positive");
        if (request_batch_size == 0) throw ConfigError("request_batch_size must be positive");
        if (max_retries < 0) throw ConfigError("max_retries must be non-negative");
    }
};

/// Tokens and requests spent by embedding calls, for cost accounting.
struct EmbedUsage {
    std::uint64_t tokens = 0;
    std::uint64_t requests = 0;
};

/// Text to dense vector. Implementations are stateless with respect to
/// results and callable from many threads.
class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::size_t dim() const = 0;
    virtual const std::string& model_id() const = 0;

    /// Embeds `texts` in order. Every element must be non-empty after
    /// trimming. Errors carry the index of the failing element.
    virtual std::vector<Vector> embed_batch(std::span<const std::string> texts,
                                            EmbedUsage* usage = nullptr) = 0;

    Vector embed_text(std::string_view text, EmbedUsage* usage = nullptr) {
        std::string s(text);
        auto out = embed_batch(std::span<const std::string>(&s, 1), usage);
        return std::move(out.front());
    }

protected:
    static void check_texts(std::span<const std::string> texts) {
        for (std::size_t i = 0; i < texts.size(); ++i) {
            if (text::trim(texts[i]).empty())
                throw PreconditionError("embed: text at index " + std::to_string(i) +
                                        " is empty after trimming");
        }
    }
};

// ---------------------------------------------------------------------------

inline double dot(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

inline double l2_norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

/// Cosine similarity; 0 when either vector has zero norm.
inline double cosine(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw DimensionMismatch(a.size(), b.size());
    double na = l2_norm(a), nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

/// 64-bit FNV-1a. Stable across platforms and standard libraries, unlike
/// std::hash.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Deterministic local provider: lowercase, split on non-alphanumerics, hash
/// each token into one of `dim` buckets, accumulate counts, L2-normalize.
/// Vectors are a pure function of (text, dim), and cosine similarity tracks
/// token overlap, so retrieval tests behave like real semantic search.
class HashedBagEmbedder final : public EmbeddingProvider {
public:
    explicit HashedBagEmbedder(std::size_t dim, std::string model_id = "hashed-bow-v1")
        : dim_(dim), model_id_(std::move(model_id)) {
        if (dim_ == 0) throw ConfigError("embedding dim must be positive");
    }

    std::size_t dim() const override { return dim_; }
    const std::string& model_id() const override { return model_id_; }

    std::vector<Vector> embed_batch(std::span<const std::string> texts, EmbedUsage* usage = nullptr) override {
        check_texts(texts);
        std::vector<Vector> out;
        out.reserve(texts.size());
        for (const auto& t : texts) {
            out.push_back(embed_one(t));
            if (usage) usage->tokens += default_token_counter().count(t);
        }
        if (usage && !texts.empty()) ++usage->requests;
        return out;
    }

    Vector embed_one(std::string_view text) const {
        auto tokens = text::alnum_tokens(text);
        // Punctuation-only text has no tokens; fall back to the trimmed text
        // itself so the vector is never zero.
        if (tokens.empty()) tokens.emplace_back(text::trim(text));
        std::vector<double> acc(dim_, 0.0);
        for (const auto& tok : tokens) acc[fnv1a64(tok) % dim_] += 1.0;
        double norm = 0.0;
        for (double v : acc) norm += v * v;
        norm = std::sqrt(norm);
        Vector v(dim_);
        for (std::size_t i = 0; i < dim_; ++i) v[i] = static_cast<float>(acc[i] / norm);
        return v;
    }

private:
    std::size_t dim_;
    std::string model_id_;
};

}  // namespace malcve::embed
