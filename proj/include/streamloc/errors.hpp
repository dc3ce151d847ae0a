#pragma once

#include <stdexcept>
#include <string>

namespace streamloc {

// Error taxonomy shared across the library. The CLI maps these onto process
// exit codes (see tools/).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/argument shape disagreement.
struct ShapeError : Error {
    using Error::Error;
};

// Frames or inserts arriving out of stream order.
struct StreamOrderError : Error {
    using Error::Error;
};

// Argument outside its valid domain (scale index, probability range, ...).
struct DomainError : Error {
    using Error::Error;
};

// Memory capacity constraints violated (total size below scale count, ...).
struct CapacityError : Error {
    using Error::Error;
};

// Token outside the configured vocabulary.
struct VocabularyError : Error {
    using Error::Error;
};

// Operation issued against an object in the wrong state (missing grads, ...).
struct StateError : Error {
    using Error::Error;
};

// Numerical evaluation produced a non-finite value.
struct EvalError : Error {
    using Error::Error;
};

// Bad configuration file or overrides. CLI exit code 3.
struct ConfigError : Error {
    using Error::Error;
};

// Checkpoint unreadable or incompatible with the model. CLI exit code 4.
struct CheckpointError : Error {
    using Error::Error;
};

// Malformed stream/annotation input data. CLI exit code 2.
struct InputError : Error {
    using Error::Error;
};

}  // namespace streamloc
