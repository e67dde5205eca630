#pragma once

#include <stdexcept>
#include <string>

namespace genrec {

// Base for all library errors. CLI maps these to exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed graph construction or evaluation (shape mismatch, non-scalar loss, ...).
struct GraphError : Error {
    using Error::Error;
};

// Bad configuration: out-of-range hyperparameter, unknown key, invalid strategy combo.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed or inconsistent input data files.
struct DataError : Error {
    using Error::Error;
};

// Training produced a non-finite loss.
struct DivergenceError : Error {
    using Error::Error;
};

} // namespace genrec
