#pragma once

#include <stdexcept>
#include <string>

namespace crnet {

// Base of every error the library raises. `kind()` is a short, stable,
// machine-greppable class name used by the CLI when reporting failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept = 0;
};

// Tensor shape or extent violations (mismatched axes, non-divisible extents).
class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape"; }
};

// Invalid configuration values or unknown config keys.
class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config"; }
};

// Malformed or truncated files, missing dataset pieces.
class FormatError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "format"; }
};

// Parameter-set mismatches: missing, extra or mis-shaped parameter paths.
class ParamError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "params"; }
};

// Non-finite values encountered during training.
class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric"; }
};

}  // namespace crnet
