#pragma once

#include <stdexcept>
#include <string>

namespace kansae {

// Base class for every error this library throws on purpose.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration values, schema violations, precondition failures.
struct ConfigError : Error {
    using Error::Error;
};

// Degenerate numeric domain (empty span, zero variance, all-equal input).
struct DomainError : Error {
    using Error::Error;
};

// Shape mismatch between operands.
struct DimensionError : Error {
    using Error::Error;
};

// Index outside the valid range.
struct IndexError : Error {
    using Error::Error;
};

// Malformed on-disk container (magic, version, size mismatch, truncation).
struct FormatError : Error {
    using Error::Error;
};

// Underlying filesystem failure.
struct IoError : Error {
    using Error::Error;
};

// NaN/Inf where finite values are required.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace kansae
