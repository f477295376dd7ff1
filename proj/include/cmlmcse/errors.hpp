#pragma once

#include <stdexcept>
#include <string>

namespace cmlmcse {

// Root of every exception raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// A NaN/Inf appeared in a forward value, or a loss diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Operation called in the wrong lifecycle state (e.g. backward on an empty graph).
class StateError : public Error {
 public:
  using Error::Error;
};

// Zero-norm argument to a cosine similarity.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// A documented contract was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace cmlmcse
