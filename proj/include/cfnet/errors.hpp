#pragma once

#include <stdexcept>
#include <string>

namespace cfnet {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A forward primitive produced NaN or Inf from finite inputs.
class NumericError : public Error {
 public:
  using Error::Error;
};

class TapeError : public Error {
 public:
  using Error::Error;
};

// Malformed, truncated or version-mismatched file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Known magic but an unsupported format version.
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Precondition violated by an argument value (not a shape).
class ValueError : public Error {
 public:
  using Error::Error;
};

}  // namespace cfnet
