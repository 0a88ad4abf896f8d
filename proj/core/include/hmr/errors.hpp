#pragma once

#include <stdexcept>
#include <string>

namespace hmr {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shapes or dimensions do not line up.
struct ShapeError : Error {
    using Error::Error;
};

// An index (embedding id, target id, ...) is out of range.
struct IndexError : Error {
    using Error::Error;
};

// A documented precondition was violated (non-scalar loss, empty rank
// list, all-padding batch, ...).
struct ContractError : Error {
    using Error::Error;
};

// Bad configuration value (k <= 0, zero blocks, unknown config key, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Input data is unusable (too many malformed lines, empty dataset, ...).
struct DataError : Error {
    using Error::Error;
};

// File could not be opened / read / written.
struct IoError : Error {
    using Error::Error;
};

// Numeric failure during optimization (NaN gradients, non-finite loss).
struct TrainingError : Error {
    using Error::Error;
};

}  // namespace hmr
