// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace malcve {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad configuration or usage: missing tools, invalid parameters, mismatched
/// embedding dimensions. The CLI maps these to exit code 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Violated precondition of an operation (e.g. empty text to embed).
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Malformed input document. `entry_index` names the offending element when
/// the document is a list of entries.
class ParseError : public Error {
public:
    explicit ParseError(const std::string& what, std::ptrdiff_t entry_index = -1)
        : Error(what), entry_index_(entry_index) {}
    std::ptrdiff_t entry_index() const noexcept { return entry_index_; }

private:
    std::ptrdiff_t entry_index_;
};

class EmbeddingError : public Error {
public:
    EmbeddingError(const std::string& what, std::ptrdiff_t index = -1)
        : Error(what), index_(index) {}
    /// Index of the failing text within a batch, -1 when not attributable.
    std::ptrdiff_t index() const noexcept { return index_; }

private:
    std::ptrdiff_t index_;
};

class RefreshError : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public Error {
public:
    DimensionMismatch(std::size_t expected, std::size_t actual)
        : Error("embedding dimension mismatch: expected " + std::to_string(expected) + ", got " +
                std::to_string(actual)),
          expected_(expected), actual_(actual) {}
    std::size_t expected() const noexcept { return expected_; }
    std::size_t actual() const noexcept { return actual_; }

private:
    std::size_t expected_;
    std::size_t actual_;
};

/// Prompt exceeds the model's context window.
class ContextTooLarge : public Error {
public:
    ContextTooLarge(std::size_t prompt_tokens, std::size_t limit)
        : Error("prompt of " + std::to_string(prompt_tokens) + " tokens exceeds context limit of " +
                std::to_string(limit)),
          prompt_tokens_(prompt_tokens), limit_(limit) {}
    std::size_t prompt_tokens() const noexcept { return prompt_tokens_; }
    std::size_t limit() const noexcept { return limit_; }

private:
    std::size_t prompt_tokens_;
    std::size_t limit_;
};

/// Model output failed structured validation after the repair reprompt.
/// The raw text of the final response is preserved.
class SchemaError : public Error {
public:
    SchemaError(const std::string& what, std::string raw) : Error(what), raw_(std::move(raw)) {}
    const std::string& raw() const noexcept { return raw_; }

private:
    std::string raw_;
};

class LlmTransportError : public Error {
public:
    using Error::Error;
};

/// Evaluation inputs reference files with no ground-truth row.
class MissingTruthError : public Error {
public:
    explicit MissingTruthError(std::vector<std::string> hashes)
        : Error(build_message(hashes)), hashes_(std::move(hashes)) {}
    const std::vector<std::string>& hashes() const noexcept { return hashes_; }

private:
    static std::string build_message(const std::vector<std::string>& hashes) {
        std::string msg = "missing ground truth for " + std::to_string(hashes.size()) + " file(s):";
        for (const auto& h : hashes) msg += " " + h;
        return msg;
    }
    std::vector<std::string> hashes_;
};

}  // namespace malcve
