#pragma once

#include <stdexcept>
#include <string>

namespace lakit {

// Base of every error thrown by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Input outside the mathematical domain of a kernel (log of a non-positive value, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Parameter or invariant violation on a value object (non-normalized target, bad index).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Inconsistent or unparseable configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Dataset or file content problems.
class DataError : public Error {
 public:
  using Error::Error;
};

// Misuse of the gradient tape (double backward, foreign variable, ...).
class TapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace lakit
