#pragma once

#include <stdexcept>
#include <string>

namespace dimerec {

// Base of every error raised by the library. The CLI maps the subclasses
// onto process exit codes (see tools/dimerec.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, degenerate vectors, divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

class DegenerateInputError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Caller broke a documented precondition (non-scalar loss, reused tape, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class DatasetError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

// Checkpoint and dataset disagree (vocabulary hash, item count, ...).
class StateMismatchError : public Error {
 public:
  using Error::Error;
};

}  // namespace dimerec
