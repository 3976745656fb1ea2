#pragma once

#include <stdexcept>
#include <string>

namespace prm {

/// Base class for every error the library throws.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Tensor shapes disagree; the message names both shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A softmax row (or a whole list) with every entry masked out.
class MaskError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration or parameter value.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input data. Carries the 1-based line number when known.
class ParseError : public Error {
public:
    ParseError(const std::string& what, long line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    explicit ParseError(const std::string& what) : Error(what), line_(0) {}
    long line() const { return line_; }

private:
    long line_;
};

/// Categorical id outside the declared vocabulary. No silent bucketing.
class VocabError : public Error {
public:
    using Error::Error;
};

/// Training aborted (non-finite gradients and the like).
class TrainError : public Error {
public:
    using Error::Error;
};

/// A pipeline stage was asked to run before its upstream artifact exists.
class DependencyError : public Error {
public:
    using Error::Error;
};

}  // namespace prm
