#pragma once

#include <stdexcept>
#include <string>

namespace radvit {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed command line or configuration (unknown key, wrong type).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Input data violates an operation's precondition (empty grid,
/// indivisible dims, bad manifest line, missing file).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or a diverged optimisation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace radvit
