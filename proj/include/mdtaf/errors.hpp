#pragma once

#include <stdexcept>
#include <string>

namespace mdtaf {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents that do not line up for an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Hyperparameters that cannot produce a valid computation
// (non-positive output extents, divisibility violations).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse: backward on a non-scalar, backward twice, etc.
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf detected while the NaN check mode is enabled, or a non-finite loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

class MagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Stored tensor does not match what the configuration expects.
class ShapeMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TensorCountError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace mdtaf
