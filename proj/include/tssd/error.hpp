#pragma once

#include <stdexcept>
#include <string>

namespace tssd {

/// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not satisfy an operation's shape rule.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or specification value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or inconsistent input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A NaN/Inf appeared where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the recording tape (stale handle, consumed tape, ...).
class TapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace tssd
