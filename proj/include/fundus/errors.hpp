#pragma once

#include <stdexcept>
#include <string>

namespace fundus {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents disagree with what an operator requires.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument is out of its legal range.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// An object was used in a state that does not permit the call.
class StateError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content. The message carries the file name and, when
/// known, the line number.
class ParseError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Training diverged (non-finite loss or gradient).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace fundus
