#pragma once

#include <stdexcept>
#include <string>

namespace kerhrm {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Input matrix/vector dimensions do not match.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration value (negative weight, empty seed list, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Degenerate mathematical object: zero direction, single environment, ...
struct DegenerateError : Error {
    using Error::Error;
};

// Non-finite values, singular systems, stuck samplers.
struct NumericError : Error {
    using Error::Error;
};

// Malformed binary file (bad magic, truncation, count mismatch).
struct FormatError : Error {
    using Error::Error;
};

// Malformed text input (CSV cells, config lines).
struct ParseError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

} // namespace kerhrm
