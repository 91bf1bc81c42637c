#pragma once

#include <stdexcept>
#include <string>

namespace w2r2 {

// Base of every error the library throws. The CLI maps the subclasses onto
// its exit-code contract (see tools/w2r2_cli.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or argument mismatch in a tensor operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration, invalid argument to a public operation, or an
// input file that does not match its schema.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite value produced (or supplied) where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// File-system failure; the message always carries the offending path.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace w2r2
