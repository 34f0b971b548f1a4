#pragma once

#include <stdexcept>
#include <string>

namespace glaucad {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or argument supplied by the caller.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor extents do not agree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Missing, unreadable or malformed files and datasets.
class DataError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced during a forward or backward pass.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace glaucad
