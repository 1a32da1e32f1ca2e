#pragma once

#include <stdexcept>
#include <string>

namespace looplab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class SingularMatrixError : public Error {
 public:
  using Error::Error;
};

/// Iterative solver gave up. `best_estimate` is the last value it had.
class NoConvergenceError : public Error {
 public:
  NoConvergenceError(const std::string& what, double best_estimate)
      : Error(what), best_estimate_(best_estimate) {}
  double best_estimate() const noexcept { return best_estimate_; }

 private:
  double best_estimate_;
};

/// A forward step produced NaN or Inf.
class NumericOverflowError : public Error {
 public:
  using Error::Error;
};

/// A stability hypothesis (e.g. rho < 1) does not hold.
class RegimeError : public Error {
 public:
  using Error::Error;
};

/// The linear test model has no unique fixed point.
class DegenerateModelError : public Error {
 public:
  using Error::Error;
};

/// A file or record could not be parsed.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace looplab
