#pragma once

#include <stdexcept>
#include <string>

namespace gmcl {

// Error taxonomy maps onto the CLI exit codes: usage errors are handled by the
// argument parser (1), config/data/shape problems exit 2, divergence exits 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
    using Error::Error;
};

// Bad argument values: labels out of range, empty splits, bad indices.
struct ValueError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

// File format or cross-file consistency problems.
struct DataError : Error {
    using Error::Error;
};

// A requested parameter is not reachable from the loss being differentiated.
struct ConnectivityError : Error {
    using Error::Error;
};

struct DivergenceError : Error {
    using Error::Error;
};

// Metric undefined on the given inputs (e.g. no positives in any class).
struct MetricError : Error {
    using Error::Error;
};

}  // namespace gmcl
