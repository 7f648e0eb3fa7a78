#pragma once

#include <stdexcept>
#include <string>

namespace outfitlab {

// Base class for everything thrown by this library. The CLI maps the
// subclasses to process exit codes: ConfigError -> 2, DataError -> 3,
// NumericError -> 4.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid parameters, impossible configurations, shape mismatches.
struct ConfigError : Error {
  using Error::Error;
};

struct DimensionError : ConfigError {
  using ConfigError::ConfigError;
};

// Malformed or inconsistent inputs: unknown ids, unreadable files,
// parse failures, metrics asked of one-class lists.
struct DataError : Error {
  using Error::Error;
};

struct ParseError : DataError {
  using DataError::DataError;
};

struct MetricError : DataError {
  using DataError::DataError;
};

// Raised by erase/replace when an outfit cannot be augmented as asked
// (single-item outfit, category with no substitutes). Callers that build
// view pairs catch this and fall back to an applicable kind.
struct AugmentationInapplicable : DataError {
  using DataError::DataError;
};

// Degenerate numerics: near-zero norms where a direction is required,
// non-finite losses or gradients during training.
struct NumericError : Error {
  using Error::Error;
};

struct DivergenceError : NumericError {
  using NumericError::NumericError;
};

}  // namespace outfitlab
