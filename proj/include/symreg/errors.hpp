#pragma once

#include <stdexcept>
#include <string>

namespace symreg {

// Base for every error raised by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A token id outside the vocabulary, or a malformed sequence text.
struct CorruptSequence : Error {
    using Error::Error;
};

// An operation that requires a Complete sequence received a Partial or Invalid one.
struct IncompleteSequence : Error {
    using Error::Error;
};
struct InvalidSequence : Error {
    using Error::Error;
};

// Shape mismatch between an expression, its constants and the data.
struct DimensionError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

// Failure of a next-token policy backend (remote protocol, handshake, transport).
struct PolicyError : Error {
    using Error::Error;
};

// User-supplied configuration that cannot be honoured.
struct ConfigError : Error {
    using Error::Error;
};

} // namespace symreg
