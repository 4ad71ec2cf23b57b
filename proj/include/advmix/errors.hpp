#pragma once

#include <stdexcept>
#include <string>

namespace advmix {

// Base of every error raised by the library. The CLI maps the concrete
// subclass onto a process exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

// A caller broke a documented precondition (e.g. unnormalized probabilities).
class ContractError : public Error {
public:
    using Error::Error;
};

// Misuse of a Tape: reuse after backward, foreign loss, non-scalar loss.
class TapeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class CheckpointError : public DataError {
public:
    using DataError::DataError;
};

class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace advmix
