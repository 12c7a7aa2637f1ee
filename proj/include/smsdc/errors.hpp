#pragma once

#include <stdexcept>
#include <string>

namespace smsdc {

/// Base class for every error this library throws on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor extents do not line up (matmul inner dims, broadcast, widths).
struct ShapeError : Error {
    using Error::Error;
};

/// Inconsistent or invalid configuration (kernel grids, head counts, keys).
struct ConfigError : Error {
    using Error::Error;
};

/// A file does not conform to its binary/text layout. Messages name the
/// failing field and, for binary files, the byte offset.
struct FormatError : Error {
    using Error::Error;
};

/// Missing or inconsistent data: empty evaluation sets, unresolved ids,
/// batches too small to mine a negative from.
struct DataError : Error {
    using Error::Error;
};

/// Non-finite values where finite ones are required (debug tensor checks,
/// NaN gradients, diverged losses).
struct NumericError : Error {
    using Error::Error;
};

/// API misuse that is a programming error rather than bad input,
/// e.g. seeding backward from a non-scalar.
struct ContractError : Error {
    using Error::Error;
};

}  // namespace smsdc
