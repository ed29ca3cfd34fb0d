#pragma once

#include <stdexcept>
#include <string>

namespace dynfuse {

// Base for every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or consumed by an operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value or combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Invalid argument that is neither a shape nor a config problem
// (labels outside {0,1}, empty sequences, single-class inputs...).
class ValueError : public Error {
 public:
  using Error::Error;
};

// File missing, unreadable, unwritable or malformed.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace dynfuse
