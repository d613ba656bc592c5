#pragma once

#include <stdexcept>
#include <string>

namespace crab {

// Root of every error the library raises. Each subclass maps onto one of the
// CLI exit codes (see exit_code_for in harness.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Value outside an operation's mathematical domain (e.g. log of x <= 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced from finite inputs.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Input with no valid positions (fully masked row, empty split, ...).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed binary file; message carries the byte offset.
class FormatError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace crab
