#pragma once

#include <stdexcept>
#include <string>

namespace racmf {

/// Base of every error raised by the library. The CLI maps subclasses to exit
/// codes: ContractError -> 3, everything else -> 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A configuration or spec object violates its invariants.
class SpecError : public Error {
public:
    SpecError(const std::string& field, const std::string& what)
        : Error("invalid " + field + ": " + what), field_(field) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class PreconditionError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

/// Raised when a quantity is mathematically undefined for the given input
/// (e.g. a texture matrix with no valid pixel pairs).
class FeatureUndefinedError : public Error {
public:
    using Error::Error;
};

/// Internal contract violation (e.g. a frozen model changed).
class ContractError : public Error {
public:
    using Error::Error;
};

}  // namespace racmf
