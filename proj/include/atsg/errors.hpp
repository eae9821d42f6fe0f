#pragma once

#include <stdexcept>
#include <string>

namespace atsg {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf detected, divergence, or a numerically degenerate input.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters, run configuration, or experiment grid.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Bad or inconsistent input data (volumes, masks, manifests).
class DataError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public DataError {
 public:
  using DataError::DataError;
};

class LengthMismatchError : public DataError {
 public:
  using DataError::DataError;
};

class UnknownDtypeError : public DataError {
 public:
  using DataError::DataError;
};

class LabelRangeError : public DataError {
 public:
  using DataError::DataError;
};

/// A metric is not defined for the given inputs (e.g. empty foreground).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

/// A statistical test has no valid answer (zero-variance differences).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

}  // namespace atsg
