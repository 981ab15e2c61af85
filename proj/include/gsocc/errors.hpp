#pragma once

#include <stdexcept>
#include <string>

namespace gsocc {

/// Base class for all gsocc errors. The `kind()` string is stable and
/// machine-readable; the CLI maps it into error JSON on stderr.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct InvalidParameterError : Error {
    explicit InvalidParameterError(const std::string& what) : Error("invalid-parameter", what) {}
};

struct InvalidGaussianError : Error {
    explicit InvalidGaussianError(const std::string& what) : Error("invalid-gaussian", what) {}
};

struct InvalidInputError : Error {
    explicit InvalidInputError(const std::string& what) : Error("invalid-input", what) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error("numeric-input", what) {}
};

struct EmptyContextError : Error {
    explicit EmptyContextError(const std::string& what) : Error("empty-context", what) {}
};

struct InvalidTapeError : Error {
    explicit InvalidTapeError(const std::string& what) : Error("invalid-tape", what) {}
};

struct DegenerateSceneError : Error {
    explicit DegenerateSceneError(const std::string& what) : Error("degenerate-scene", what) {}
};

struct IoError : Error {
    explicit IoError(const std::string& what) : Error("io", what) {}
};

} // namespace gsocc
