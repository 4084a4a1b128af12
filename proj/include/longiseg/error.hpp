#pragma once

#include <stdexcept>
#include <string>

namespace longiseg {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed file content (bad magic, inconsistent header fields, ...).
class FormatError : public Error {
public:
    explicit FormatError(const std::string& msg) : Error("format error: " + msg) {}
};

/// Well-formed input that falls outside the supported subset.
class UnsupportedError : public Error {
public:
    explicit UnsupportedError(const std::string& msg) : Error("unsupported: " + msg) {}
};

/// Values violate a documented invariant (non-finite voxels, labels out of range, ...).
class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error("data error: " + msg) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error("i/o error: " + msg) {}
};

/// Tensor shape mismatch between operands.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

/// API called against its contract (missing priors, mismatched grids, ...).
class UsageError : public Error {
public:
    explicit UsageError(const std::string& msg) : Error("usage error: " + msg) {}
};

/// Non-finite value surfaced during numerical work.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error("numeric error: " + msg) {}
};

}  // namespace longiseg
