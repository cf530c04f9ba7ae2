#pragma once

#include <stdexcept>
#include <string>

namespace bse {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent network description.
class GridError : public Error {
 public:
  enum class Code {
    Schema,
    DuplicateBus,
    MissingSlack,
    MultipleSlack,
    Disconnected,
    UnknownBus,
    PhaseMismatch,
    SelfLoop,
  };

  GridError(Code code, const std::string& what) : Error(what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

/// Newton-Raphson did not reach the mismatch tolerance.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double final_mismatch, int iterations)
      : Error(what), final_mismatch_(final_mismatch), iterations_(iterations) {}
  double final_mismatch() const noexcept { return final_mismatch_; }
  int iterations() const noexcept { return iterations_; }

 private:
  double final_mismatch_;
  int iterations_;
};

/// A linear system in an iterative solver was (numerically) singular.
class SingularMatrixError : public Error {
 public:
  using Error::Error;
};

/// Shapes or lengths of arguments do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A precondition on an argument value was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Numeric model fitting failed (non-stationary AR, ill-conditioned system, ...).
class FitError : public Error {
 public:
  using Error::Error;
};

}  // namespace bse
