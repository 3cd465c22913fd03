#pragma once

#include <stdexcept>
#include <string>

namespace nucssl {

// Error categories map onto distinct CLI exit codes (see cli.hpp).

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad or inconsistent configuration values, unknown keys.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Missing, unreadable, corrupt or unsupported files; malformed dataset layouts.
class IoError : public Error {
public:
    using Error::Error;
};

// Checkpoint schema/version mismatches and architecture mismatches.
class SchemaError : public Error {
public:
    using Error::Error;
};

// Precondition violations on shapes and sizes.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

} // namespace nucssl
