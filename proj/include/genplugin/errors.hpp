#pragma once

#include <stdexcept>
#include <string>

namespace genplugin {

/// Errors caused by bad input, configuration, or missing artifacts. The CLI maps
/// these to exit code 1; anything else is an internal error (exit code 2).
class UserError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public UserError {
public:
    ParseError(const std::string& file, std::size_t line, const std::string& what)
        : UserError(file + ":" + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class ConfigError : public UserError {
public:
    using UserError::UserError;
};

class MissingArtifact : public UserError {
public:
    using UserError::UserError;
};

class StaleCache : public UserError {
public:
    using UserError::UserError;
};

/// A loss term evaluated to NaN or infinity.
class NonFiniteLoss : public std::runtime_error {
public:
    explicit NonFiniteLoss(const std::string& term)
        : std::runtime_error("non-finite loss term: " + term), term_(term) {}
    const std::string& term() const noexcept { return term_; }

private:
    std::string term_;
};

}  // namespace genplugin
