#pragma once

#include <stdexcept>
#include <string>

namespace sscaps {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not satisfy an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or flag combinations.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent on-disk data.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A value that must be finite was NaN or infinite.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace sscaps
