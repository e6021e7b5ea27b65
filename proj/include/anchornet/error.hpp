#pragma once

#include <stdexcept>
#include <string>

namespace anchornet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or parameter shapes are incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A receptive-field or input-size constraint is violated (e.g. K > min(H, W)).
class ConstraintError : public Error {
 public:
  using Error::Error;
};

/// An operation was invoked in the wrong state (backward without forward,
/// inference without running statistics, untrained model, ...).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents or unsupported file format.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Index or argument out of its valid range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Requested compute budget cannot be met by any threshold schedule.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace anchornet
