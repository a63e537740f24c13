#pragma once

#include <stdexcept>
#include <string>

namespace cbforge {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input violates a documented precondition or type invariant.
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& message, std::string field = {})
        : Error(message), field_(std::move(field)) {}

    const std::string& field() const { return field_; }

private:
    std::string field_;
};

class TransportError : public Error {
public:
    using Error::Error;
};

/// Endpoint answered with a non-retryable HTTP status.
class ProtocolError : public Error {
public:
    ProtocolError(int status, const std::string& message) : Error(message), status_(status) {}
    int status() const { return status_; }

private:
    int status_;
};

/// No label could be recovered from a model reply.
class UnparseableOutput : public Error {
public:
    UnparseableOutput(const std::string& message, std::string raw)
        : Error(message), raw_(std::move(raw)) {}
    const std::string& raw() const { return raw_; }

private:
    std::string raw_;
};

/// A label was recovered but is not one of the response options.
class InvalidLabel : public Error {
public:
    InvalidLabel(const std::string& message, std::string label, std::string raw)
        : Error(message), label_(std::move(label)), raw_(std::move(raw)) {}
    const std::string& label() const { return label_; }
    const std::string& raw() const { return raw_; }

private:
    std::string label_;
    std::string raw_;
};

class ParseError : public Error {
public:
    ParseError(const std::string& message, std::string raw) : Error(message), raw_(std::move(raw)) {}
    const std::string& raw() const { return raw_; }

private:
    std::string raw_;
};

class SequencingError : public Error {
public:
    using Error::Error;
};

class CorruptionError : public Error {
public:
    using Error::Error;
};

class NotFound : public Error {
public:
    using Error::Error;
};

class Conflict : public Error {
public:
    using Error::Error;
};

/// The guideline-synthesis call returned nothing usable.
class SynthesisError : public Error {
public:
    using Error::Error;
};

/// A sampling request cannot be satisfied by the remaining pool.
class PoolExhausted : public Error {
public:
    using Error::Error;
};

/// Statistic undefined for the given input, e.g. zero-variance differences.
class DegenerateInput : public Error {
public:
    using Error::Error;
};

}  // namespace cbforge
