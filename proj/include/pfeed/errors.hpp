#pragma once

#include <stdexcept>
#include <string>

namespace pfeed {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or missing input data (empty corpus, unknown ids, bad files).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Tensor or vector shapes that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Values outside a function's mathematical domain (log of 0, division by 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace pfeed
